"""Terminal summary: one pass/fail line per acceptance criterion."""

import re

_TITLES = {
    1: "event-sum integrals match the brute-force double loop (1e-12 abs)",
    2: "compensated integrals are mean zero componentwise (4 SE)",
    3: "flat-semigroup moment identity: Hilbert equality, l4 stability",
    4: "maximal-inequality ratio matrix: finite, M-stable, scale-exact",
    5: "strong-solution residual decay and Richardson slope",
    6: "pathwise energy split: identity, inequality, dissipative drift",
    7: "resolvent approximants converge monotonically to the convolution",
    8: "stopped bookkeeping: bit-identity, exact first crossing, pre-cut cap",
    9: "fourth-moment recursion with scalar count oracle and sub-report",
    10: "layer-cake tail integrals bracket the direct moment",
    11: "identical config and seed reproduce artifacts byte for byte",
}

_PATTERN = re.compile(r"::test_a(\d+)_")
_results: dict[int, list] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    entry = _results.setdefault(key, ["PASS", 0.0])
    if report.failed or report.skipped:
        entry[0] = "FAIL"
    if report.when == "call":
        entry[1] = report.duration


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_results):
        outcome, duration = _results[key]
        title = _TITLES.get(key, "")
        terminalreporter.write_line(f"A{key:<2} {outcome}  ({duration:6.1f}s)  {title}")
