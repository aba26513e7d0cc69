"""Acceptance battery; conftest prints one summary line per criterion.

Every test pins its statistical or exactness gates and its wall-clock
budget.  Shared ensembles are cached module-wide so the heavy criteria
stay within their budgets on reruns.
"""

import json
import time
from functools import lru_cache

import numpy as np
import pytest

from jumpconv.cli import main as cli_main
from jumpconv.prm import MarkSpace, make_rng, sample_path, substream
from jumpconv.sconv import (
    ConvolutionScenario,
    convolution_path,
    ito_terms,
    strong_solution_residual,
    yosida_convolution,
)
from jumpconv.sgp import Generator
from jumpconv.sint import (
    StepIntegrand,
    constant_field,
    function_field,
    integrate_field,
    integrate_step,
    linear_field,
    polynomial_field,
    step_field,
)
from jumpconv.space import SmoothSpace, norm
from jumpconv.verify import (
    Ensemble,
    ExperimentConfig,
    field_integral_ensemble,
    higher_moment_report,
    inequality_report,
    ito_isometry_report,
    layer_cake_check,
    path_statistics,
    stopped_report,
)

MS3 = MarkSpace(("a", "b", "c"), (0.9, 0.6, 0.5))
MS1 = MarkSpace(("hit",), (3.0,))
T = 2.0
SP4 = SmoothSpace(4, 2.5, 2.5, 2.0)
L2 = SmoothSpace(2, 2.0, 2.0, 2.0)
L4 = SmoothSpace(3, 4.0, 4.0, 2.0)
SC1 = SmoothSpace(1, 2.0, 2.0, 2.0)

_RING4 = -0.8 * (2.0 * np.eye(4) - np.roll(np.eye(4), 1, axis=1) - np.roll(np.eye(4), -1, axis=1))


@lru_cache(maxsize=None)
def ens3(n_paths: int, seed: int) -> Ensemble:
    return Ensemble.sample(MS3, T, n_paths, seed)


@lru_cache(maxsize=None)
def ens1(n_paths: int, seed: int) -> Ensemble:
    return Ensemble.sample(MS1, 1.0, n_paths, seed)


def _wave_field(rng: np.random.Generator, d: int, n_marks: int = 3):
    amp = rng.normal(size=(n_marks, d))
    freq = rng.uniform(1.0, 3.0, size=n_marks)
    phase = rng.normal(size=(n_marks, d))

    def fn(tt, k):
        return amp[k][None, :] * np.sin(freq[k] * tt[:, None] + phase[k][None, :])

    return function_field(fn, d, n_marks, label="wave")


def _a4_roster():
    rng = np.random.default_rng(4242)
    gens = {
        "flat": Generator.identity(4),
        "uniform": Generator.diagonal([-2.5] * 4),
        "staggered": Generator.diagonal([-0.3, -0.7, -1.1, -1.6]),
        "chain": Generator.dirichlet_laplacian(4),
        "ring": Generator.dense(_RING4),
    }
    fields = {
        "const": constant_field(rng.normal(size=(3, 4))),
        "ramp": linear_field(rng.normal(size=(3, 4)), offsets=rng.normal(size=(3, 4))),
        "step": step_field([0.0, 0.5, 1.2, 2.0], rng.normal(size=(3, 3, 4))),
        "wave": _wave_field(rng, 4),
    }
    return gens, fields


def _certified_roster():
    """Five certified scenarios spanning spaces, generators and field kinds."""
    rng = np.random.default_rng(616)
    return (
        ConvolutionScenario(MS3, SP4, Generator.dense(_RING4),
                            linear_field(rng.normal(size=(3, 4)), offsets=rng.normal(size=(3, 4))),
                            T, label="ring-ramp"),
        ConvolutionScenario(MS3, SP4, Generator.diagonal([-0.3, -0.7, -1.1, -1.6]),
                            constant_field(rng.normal(size=(3, 4))), T, label="staggered-const"),
        ConvolutionScenario(MS3, SP4, Generator.dirichlet_laplacian(4),
                            _wave_field(rng, 4), T, label="chain-wave"),
        ConvolutionScenario(MS3, SmoothSpace(2, 4.0, 4.0, 2.0), Generator.identity(2),
                            step_field([0.0, 0.8, 2.0], rng.normal(size=(2, 3, 2))),
                            T, label="flat-step"),
        ConvolutionScenario(MS3, SC1, Generator.diagonal([-0.9]),
                            constant_field([[0.5], [-0.3], [0.2]]), T, label="scalar-decay"),
    )


# ---------------------------------------------------------------------- A1


def test_a1_exact_integrals_vs_double_loop():
    t0 = time.perf_counter()
    rng = np.random.default_rng(31337)
    for i in range(1000):
        w = rng.uniform(0.3, 1.5, size=2)
        ms = MarkSpace(("u", "v"), (float(w[0]), float(w[1])))
        path = sample_path(ms, 1.0, make_rng(substream(8101, i)))
        n_cells = int(rng.integers(1, 5))
        bp = np.concatenate([[0.0], np.sort(rng.uniform(0.05, 1.0, size=n_cells))])
        V = rng.normal(size=(n_cells, 2, 2))
        t = float(rng.uniform(0.05, 1.0))

        want = np.zeros(2)
        for e in range(path.n_events):  # events x cells, the slow exact form
            te, ze = float(path.times[e]), int(path.marks[e])
            if te > t:
                continue
            for j in range(n_cells):
                if bp[j] < te <= bp[j + 1]:
                    want += V[j, ze]
        for j in range(n_cells):
            hi = min(float(bp[j + 1]), t)
            if hi > bp[j]:
                for k in range(2):
                    want -= w[k] * (hi - float(bp[j])) * V[j, k]

        fld = step_field(bp, V)
        got_field = integrate_field(path, fld, t)
        si = StepIntegrand(bp, tuple(
            (((0,), V[j, 0]), ((1,), V[j, 1])) for j in range(n_cells)
        ), 2)
        got_step = integrate_step(path, si, t)
        assert np.all(np.abs(got_field - want) <= 1e-12)
        assert np.all(np.abs(got_step - want) <= 1e-12)
    assert time.perf_counter() - t0 < 10.0


# ---------------------------------------------------------------------- A2


def test_a2_compensated_integrals_center_on_zero():
    t0 = time.perf_counter()
    rng = np.random.default_rng(201)
    ens = ens3(100_000, 7001)
    fields = [
        (constant_field(rng.normal(size=(3, 2))), 2.0),
        (linear_field(rng.normal(size=(3, 2)), offsets=rng.normal(size=(3, 2))), 1.3),
        (polynomial_field(rng.normal(size=(3, 3, 3))), 2.0),
        (step_field([0.0, 0.7, 1.4, 2.0], rng.normal(size=(3, 3, 3))), 1.7),
        (_wave_field(rng, 2), 2.0),
        (constant_field(rng.normal(size=(3, 4))), 0.9),
        (linear_field(rng.normal(size=(3, 4))), 2.0),
        (step_field([0.0, 1.0, 2.0], rng.normal(size=(2, 3, 2))), 1.5),
        (polynomial_field(rng.normal(size=(3, 4, 2))), 1.1),
        (linear_field(rng.normal(size=(3, 3)), offsets=rng.normal(size=(3, 3))), 2.0),
    ]
    assert len(fields) == 10
    for fld, t_eval in fields:
        vals = field_integral_ensemble(ens, fld, t_eval)
        se = vals.std(axis=0, ddof=1) / np.sqrt(vals.shape[0])
        assert np.all(np.abs(vals.mean(axis=0)) <= 4.0 * se), fld.label
    assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------------- A3


def test_a3_flat_semigroup_moment_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    hil = ConvolutionScenario(MS3, SmoothSpace(3, 2.0, 2.0, 2.0), Generator.identity(3),
                              constant_field(rng.normal(size=(3, 3))), T)
    rep = ito_isometry_report(
        ExperimentConfig(hil, q_prime=2.0, n_paths=100_000, base_seed=7001),
        ensemble=ens3(100_000, 7001),
    )
    assert rep.extras["hilbert"] is True
    assert abs(rep.lhs_mean - rep.rhs_mean) <= 4.0 * rep.lhs_stderr
    assert rep.rhs_stderr == 0.0

    quart = ConvolutionScenario(MS3, L4, Generator.identity(3),
                                constant_field(rng.normal(size=(3, 3))), T)
    r1 = ito_isometry_report(
        ExperimentConfig(quart, q_prime=2.0, n_paths=20_000, base_seed=7003),
        ensemble=ens3(20_000, 7003),
    )
    r2 = ito_isometry_report(
        ExperimentConfig(quart, q_prime=2.0, n_paths=40_000, base_seed=7003),
        ensemble=ens3(40_000, 7003),
    )
    for r in (r1, r2):
        assert np.isfinite(r.ratio_hat) and r.ratio_hat > 0.0
    assert 0.5 < r2.ratio_hat / r1.ratio_hat < 2.0
    assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------------- A4


def test_a4_ratio_matrix_finite_stable_scale_exact():
    t0 = time.perf_counter()
    gens, fields = _a4_roster()
    q_values = (0.5, SP4.p, SP4.q, 2.0 * SP4.q)
    m_lg, m_sm, seed = 10_000, 1_000, 424242
    e_lg, e_sm = ens3(m_lg, seed), ens3(m_sm, seed)

    def cfg(scn, n, qp=2.0):
        return ExperimentConfig(scn, q_prime=qp, n_paths=n, base_seed=seed)

    def modes_for(qp):
        out = ["thm4_9"]
        if qp >= SP4.q:
            out.append("thm4_6")
        if qp <= SP4.p:
            out.append("cor4_10")
        return out

    for g_name, gen in gens.items():
        for f_name, fld in fields.items():
            scn = ConvolutionScenario(MS3, SP4, gen, fld, T, label=f"{g_name}-{f_name}")
            stats_lg = path_statistics(cfg(scn, m_lg), e_lg)
            stats_sm = path_statistics(cfg(scn, m_sm), e_sm)
            base = {}
            for qp in q_values:
                for mode in modes_for(qp):
                    r_lg = inequality_report(cfg(scn, m_lg, qp), mode, e_lg, stats=stats_lg)
                    r_sm = inequality_report(cfg(scn, m_sm, qp), mode, e_sm, stats=stats_sm)
                    tag = (scn.label, mode, qp)
                    assert np.isfinite(r_lg.ratio_hat) and r_lg.ratio_hat > 0.0, tag
                    assert 0.5 <= r_lg.ratio_hat / r_sm.ratio_hat <= 2.0, tag
                    base[(mode, qp)] = r_lg.ratio_hat
            for c in (0.125, 8.0):
                scn_c = scn.replace_field(fld.transform(scale=c))
                stats_c = path_statistics(cfg(scn_c, m_lg), e_lg)
                for (mode, qp), r0 in base.items():
                    r_c = inequality_report(
                        cfg(scn_c, m_lg, qp), mode, e_lg, stats=stats_c
                    ).ratio_hat
                    assert abs(r_c / r0 - 1.0) <= 1e-12, (scn.label, mode, qp, c)
    assert time.perf_counter() - t0 < 600.0


# ---------------------------------------------------------------------- A5


def test_a5_strong_solution_residual_and_slope():
    t0 = time.perf_counter()
    scn = ConvolutionScenario(MS3, SC1, Generator.diagonal([-0.9]),
                              constant_field([[0.5], [-0.3], [0.2]]), T)
    slopes = []
    for i in range(20):
        path = sample_path(MS3, T, make_rng(substream(505, i)))
        r = [strong_solution_residual(scn, path, grid=g) for g in (512, 1024, 2048, 4096)]
        assert r[3] < 1e-6
        for k in range(3):
            slopes.append(np.log2(r[k] / r[k + 1]))
    assert 1.7 <= float(np.mean(slopes)) <= 2.3

    flat = ConvolutionScenario(MS3, L2, Generator.identity(2),
                               constant_field(make_rng(510).normal(size=(3, 2))), T)
    for i in range(3):
        path = sample_path(MS3, T, make_rng(substream(511, i)))
        assert strong_solution_residual(flat, path, grid=512) <= 1e-12
    assert time.perf_counter() - t0 < 30.0


# ---------------------------------------------------------------------- A6


def test_a6_energy_split_identity_and_inequality():
    t0 = time.perf_counter()
    for scn in _certified_roster():
        for i in range(200):
            path = sample_path(MS3, T, make_rng(substream(60_000, 1000 + i)))
            tm = ito_terms(scn, path, grid=512)
            scale = max(1.0, abs(tm.total), abs(tm.martingale), abs(tm.jump))
            assert tm.defect <= 10.0 * tm.quad_tol, (scn.label, i)
            assert tm.total <= tm.martingale + tm.jump + 10.0 * tm.quad_tol, (scn.label, i)
            assert tm.drift <= 1e-9 * scale, (scn.label, i)
    assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------------- A7


def _a7_roster():
    """Certified scenarios with moderate rates: the resolvent gap at the
    largest n scales like max_rate / n, so rates stay below one here."""
    rng = np.random.default_rng(717)
    return (
        ConvolutionScenario(MS3, SP4, Generator.dense(0.2 * _RING4),
                            linear_field(rng.normal(size=(3, 4)), offsets=rng.normal(size=(3, 4))),
                            T, label="mild-ring-ramp"),
        ConvolutionScenario(MS3, SP4, Generator.diagonal([-0.08, -0.18, -0.28, -0.4]),
                            constant_field(rng.normal(size=(3, 4))), T, label="mild-diag-const"),
        ConvolutionScenario(MS3, SP4, Generator.dirichlet_laplacian(4, scale=0.2),
                            _wave_field(rng, 4), T, label="mild-chain-wave"),
        ConvolutionScenario(MS3, SmoothSpace(2, 4.0, 4.0, 2.0), Generator.identity(2),
                            step_field([0.0, 0.8, 2.0], rng.normal(size=(2, 3, 2))),
                            T, label="flat-step"),
        ConvolutionScenario(MS3, SC1, Generator.diagonal([-0.9]),
                            constant_field([[0.5], [-0.3], [0.2]]), T, label="scalar-decay"),
    )


def test_a7_resolvent_scheme_converges():
    t0 = time.perf_counter()
    n_values = [float(2**k) for k in range(1, 11)]
    for scn in _a7_roster():
        checked = 0
        i = 0
        while checked < 2:
            path = sample_path(MS3, T, make_rng(substream(70_000, i)))
            i += 1
            if path.n_events == 0:
                continue
            checked += 1
            cp = convolution_path(scn, path, grid=512)
            sup = cp.sup_norm(scn.sp)
            dists = []
            for n in n_values:
                cpn = yosida_convolution(scn, path, n, grid=512)
                gap = np.asarray(norm(scn.sp, cp.values - cpn.values))
                dists.append(float(gap.max()))
            for k in range(len(dists) - 1):
                assert dists[k + 1] <= dists[k] * (1.0 + 1e-9) + 1e-18, (scn.label, k)
            assert dists[-1] < 1e-3 * sup if sup > 0 else dists[-1] == 0.0

    a = 0.7
    scn = ConvolutionScenario(MS3, L2, Generator.diagonal([-a, -a]),
                              constant_field(make_rng(711).normal(size=(3, 2))), T)
    path = sample_path(MS3, T, make_rng(712))
    cp = convolution_path(scn, path, grid=256)
    for n in (2.0, 16.0, 256.0):
        cpn = yosida_convolution(scn, path, n, grid=256)
        factor = n / (n + a)
        assert np.all(
            np.abs(cpn.values - factor * cp.values) <= 1e-12 * (1.0 + np.abs(cp.values))
        )
    assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------------- A8


def test_a8_stopped_bookkeeping_is_exact():
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    scn = ConvolutionScenario(MS3, L2, Generator.diagonal([-0.5, -1.2]),
                              constant_field(rng.normal(size=(3, 2))), T)
    m, seed = 1000, 88_001
    ens = ens3(m, seed)

    plain = inequality_report(
        ExperimentConfig(scn, q_prime=L2.q, n_paths=m, base_seed=seed), "thm4_6", ens
    )
    stopped_hi = stopped_report(
        ExperimentConfig(scn, q_prime=L2.q, n_paths=m, base_seed=seed, lambda_threshold=1e12),
        ens,
    )
    for f in ("lhs_mean", "lhs_stderr", "rhs_mean", "rhs_stderr", "ratio_hat", "ratio_ci"):
        assert getattr(stopped_hi, f) == getattr(plain, f), f

    lam = 0.9
    cfg = ExperimentConfig(scn, q_prime=L2.q, n_paths=m, base_seed=seed, lambda_threshold=lam)
    st = path_statistics(cfg, ens, stop_level=lam)
    thresh = lam**L2.p
    for i in range(m):
        p = ens.path(i)
        cum, want = 0.0, np.inf
        for te, ze in zip(p.times, p.marks):
            cum += float(norm(L2, scn.field.values(np.array([te]), np.array([ze]))[0])) ** L2.p
            if cum > thresh:
                want = te
                break
        assert st.tau[i] == want, i
    assert np.all(st.pre_tau <= thresh)
    assert np.all(st.control <= st.control_full)
    assert time.perf_counter() - t0 < 30.0


# ---------------------------------------------------------------------- A9


def test_a9_fourth_moment_recursion():
    t0 = time.perf_counter()
    flat_count = ConvolutionScenario(MS1, SC1, Generator.identity(1),
                                     constant_field([[1.0]]), 1.0, label="flat-count")
    m, seed = 100_000, 9001
    ens = ens1(m, seed)
    cfg = ExperimentConfig(flat_count, q_prime=2.0, n_paths=m, base_seed=seed, moment_level=2)
    st = path_statistics(cfg, ens)
    x4 = np.asarray(norm(SC1, st.terminal)) ** 4
    lam = MS1.total_rate
    oracle = lam + 3.0 * lam**2
    se = np.std(x4, ddof=1) / np.sqrt(m)
    assert abs(float(np.mean(x4)) - oracle) <= 4.0 * se

    rep = higher_moment_report(cfg, ens)
    assert np.isfinite(rep.ratio_hat) and rep.ratio_hat > 0.0

    rng = np.random.default_rng(909)
    vec = ConvolutionScenario(MS3, L2, Generator.diagonal([-0.4, -1.0]),
                              constant_field(rng.normal(size=(3, 2))), T)
    reps = []
    for n in (4000, 8000):
        r = higher_moment_report(
            ExperimentConfig(vec, q_prime=2.0, n_paths=n, base_seed=9002, moment_level=2),
            ens3(n, 9002),
        )
        assert np.isfinite(r.ratio_hat) and r.ratio_hat > 0.0
        sub = r.extras["scalar_identity"]
        assert np.isfinite(sub["ratio_hat"]) and sub["ratio_hat"] > 0.0
        reps.append(r)
    assert 0.5 < reps[1].ratio_hat / reps[0].ratio_hat < 2.0
    subs = [r.extras["scalar_identity"]["ratio_hat"] for r in reps]
    assert 0.5 < subs[1] / subs[0] < 2.0
    assert time.perf_counter() - t0 < 120.0


# ---------------------------------------------------------------------- A10


def test_a10_layer_cake_consistency():
    t0 = time.perf_counter()
    for k, scn in enumerate(_certified_roster()):
        cfg = ExperimentConfig(scn, q_prime=2.0 if k % 2 else scn.sp.q,
                               n_paths=2000, base_seed=10_000 + k)
        rep = layer_cake_check(cfg, n_levels=256)
        assert rep.consistent, scn.label
        mid = 0.5 * (rep.tail_lower + rep.tail_upper)
        half_gap = 0.5 * (rep.tail_upper - rep.tail_lower)
        assert abs(rep.direct_mean - mid) <= 4.0 * rep.direct_stderr + half_gap, scn.label
    assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------------- A11


A11_CONFIG = """
schema_version = 1

[run]
seed = 424242
n_paths = 300
grid = 128

[markspace]
marks = ["a", "b", "c"]
weights = [0.9, 0.6, 0.5]

[space]
d = 2
r = 2.0
q = 2.0
p = 2.0

[generator]
kind = "diagonal"
rates = [-0.5, -1.2]

[field]
kind = "constant"
values = [[0.3, -0.2], [0.1, 0.5], [-0.4, 0.2]]

[scenario]
horizon = 2.0
label = "repeatability"

[experiment]
mode = "thm4_9"
q_prime = [0.5, 2.0]
"""


def test_a11_byte_identical_reruns(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(A11_CONFIG, encoding="utf-8")
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli_main(["verify", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out)
    for artifact in ("verify.csv", "summary.json"):
        a = (outs[0] / artifact).read_bytes()
        b = (outs[1] / artifact).read_bytes()
        assert a == b, artifact
    rows = json.loads((outs[0] / "summary.json").read_text())
    assert [r["q_prime"] for r in rows] == [0.5, 2.0]
    assert time.perf_counter() - t0 < 10.0
