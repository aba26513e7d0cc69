"""Batch experiment runner.

Subcommands
-----------
sample   draw marked Poisson paths, one CSV per path
verify   run the configured experiment battery, write verify.csv + summary.json
sweep    run a cartesian scenario grid, write long-format sweep.csv (resumable)

Configs are TOML with a mandatory ``schema_version = 1``; unknown keys are
errors, not warnings, and diagnostics name the offending key path.  Seed
precedence: ``--seed`` > ``JUMPCONV_SEED`` > ``[run].seed`` > 0.

Exit codes: 0 success, 2 config error, 3 IO error, 4 hypothesis violation.
Unexpected runtime failures (e.g. a non-finite statistic) exit 1.

Artifacts are byte-identical for identical (config, seed): report rows carry
wall_ms = 0 and real timings go to stderr only.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python 3.10
    import tomli as tomllib

import numpy as np

from .prm import MarkSpace, make_rng, sample_path, substream
from .sconv import ConvolutionScenario
from .sgp import Generator
from .sint import constant_field, linear_field, polynomial_field, step_field
from .space import SmoothSpace
from .verify import (
    MODES,
    Ensemble,
    ExperimentConfig,
    HypothesisError,
    higher_moment_report,
    inequality_report,
    ito_isometry_report,
    layer_cake_check,
    path_statistics,
    step_approx_convergence,
    stopped_report,
)

__all__ = ["RunManifest", "cmd_sample", "cmd_verify", "cmd_sweep", "main"]

SUMMARY_FIELDS = (
    "scenario_id", "mode", "p", "q", "q_prime", "n_paths",
    "lhs_mean", "lhs_stderr", "rhs_mean", "rhs_stderr",
    "ratio_hat", "ratio_ci_lo", "ratio_ci_hi", "wall_ms",
)

EXTRA_MODES = ("stopped", "higher_moment", "isometry", "layer_cake", "step_approx")


class ConfigError(ValueError):
    """Config parse or schema failure; rendered as exit code 2."""


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    config: Path
    out: Path
    seed: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise ConfigError("seed override must be a 64-bit unsigned integer")
        if self.jobs < 1:
            raise ConfigError("--jobs must be at least 1")


# --------------------------------------------------------------------- schema

_NUM = (int, float)
_GENERATOR_KEYS = {"kind": str, "rates": list, "scale": _NUM, "matrix": list, "d": int}
_FIELD_KEYS = {
    "kind": str, "values": list, "slopes": list, "offsets": list,
    "coeffs": list, "breakpoints": list, "label": str,
}
_SPACE_KEYS = {"d": int, "r": _NUM, "q": _NUM, "p": _NUM}

_SCHEMA = {
    "schema_version": int,
    "run": {"seed": int, "n_paths": int, "grid": int, "t_eval": _NUM},
    "markspace": {"marks": list, "weights": list},
    "space": _SPACE_KEYS,
    "generator": _GENERATOR_KEYS,
    "field": _FIELD_KEYS,
    "scenario": {"horizon": _NUM, "label": str},
    "experiment": {
        "mode": str, "q_prime": (int, float, list), "lambda_threshold": _NUM,
        "moment_level": int, "n_levels": int, "refinements": list,
    },
    "sample": {"n_paths": int, "horizon": _NUM},
    "sweep": {
        "q_prime": list, "modes": list,
        "generator": list, "field": list, "space": list,
    },
}

# sweep arrays-of-tables reuse the corresponding scalar-table schemas
_SWEEP_TABLE_SCHEMAS = {"generator": _GENERATOR_KEYS, "field": _FIELD_KEYS, "space": _SPACE_KEYS}


def _check_type(value, expected, path: str):
    # bool passes isinstance(int) checks; reject it wherever a number is wanted
    if isinstance(value, bool) and expected is not bool:
        raise ConfigError(f"key '{path}' has wrong type bool")
    if not isinstance(value, expected):
        want = expected.__name__ if isinstance(expected, type) else "number"
        raise ConfigError(f"key '{path}' must be of type {want}")


def _check_table(table: dict, schema: dict, path: str):
    for key, value in table.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown key '{here}'")
        expected = schema[key]
        if isinstance(expected, dict):
            _check_type(value, dict, here)
            _check_table(value, expected, here)
        else:
            _check_type(value, expected, here)


def load_config(path: Path) -> dict:
    # unreadable file is an IO failure (exit 3), not a malformed config
    raw = path.read_bytes()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    _check_table(doc, _SCHEMA, "")
    if "schema_version" not in doc:
        raise ConfigError("missing required key 'schema_version'")
    if doc["schema_version"] != 1:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']}")
    if "sweep" in doc:
        for name, sub in _SWEEP_TABLE_SCHEMAS.items():
            for i, entry in enumerate(doc["sweep"].get(name, [])):
                here = f"sweep.{name}[{i}]"
                _check_type(entry, dict, here)
                _check_table(entry, sub, here)
    return doc


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"missing required key '{section}.{key}'" if section else
                          f"missing required key '{key}'")
    return table[key]


def _section(doc: dict, name: str) -> dict:
    if name not in doc:
        raise ConfigError(f"missing required table [{name}]")
    return doc[name]


# ------------------------------------------------------------------- builders


def build_markspace(doc: dict) -> MarkSpace:
    tbl = _section(doc, "markspace")
    marks = _require(tbl, "marks", "markspace")
    weights = _require(tbl, "weights", "markspace")
    try:
        return MarkSpace(marks=tuple(marks), weights=tuple(float(w) for w in weights))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[markspace] {exc}") from exc


def build_space(tbl: dict, where: str = "space") -> SmoothSpace:
    try:
        return SmoothSpace(
            d=_require(tbl, "d", where), r=float(_require(tbl, "r", where)),
            q=float(_require(tbl, "q", where)), p=float(_require(tbl, "p", where)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[{where}] {exc}") from exc


def build_generator(tbl: dict, d: int, where: str = "generator") -> Generator:
    kind = _require(tbl, "kind", where)
    try:
        if kind == "identity":
            return Generator.identity(d)
        if kind == "diagonal":
            rates = _require(tbl, "rates", where)
            return Generator.diagonal([float(x) for x in rates])
        if kind == "dirichlet":
            return Generator.dirichlet_laplacian(d, scale=float(tbl.get("scale", 1.0)))
        if kind == "dense":
            return Generator.dense(np.asarray(_require(tbl, "matrix", where), dtype=float))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc
    raise ConfigError(f"[{where}] unknown generator kind '{kind}'")


def build_field(tbl: dict, where: str = "field"):
    kind = _require(tbl, "kind", where)
    label = tbl.get("label", kind)
    try:
        if kind == "constant":
            return constant_field(_require(tbl, "values", where), label=label)
        if kind == "linear":
            slopes = _require(tbl, "slopes", where)
            return linear_field(slopes, offsets=tbl.get("offsets"), label=label)
        if kind == "polynomial":
            return polynomial_field(_require(tbl, "coeffs", where), label=label)
        if kind == "step":
            return step_field(
                _require(tbl, "breakpoints", where), _require(tbl, "values", where), label=label
            )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc
    raise ConfigError(f"[{where}] unknown field kind '{kind}'")


def build_scenario(doc: dict, ms: MarkSpace, sp=None, gen_tbl=None, fld_tbl=None,
                   label: str | None = None) -> ConvolutionScenario:
    sp = sp or build_space(_section(doc, "space"))
    gen = build_generator(gen_tbl or _section(doc, "generator"), sp.d)
    field = build_field(fld_tbl or _section(doc, "field"))
    scen_tbl = _section(doc, "scenario")
    horizon = float(_require(scen_tbl, "horizon", "scenario"))
    try:
        return ConvolutionScenario(
            ms, sp, gen, field, horizon,
            label=label or scen_tbl.get("label", "scenario-0"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario rejected: {exc}") from exc


def resolve_seed(manifest: RunManifest, doc: dict) -> int:
    if manifest.seed is not None:
        return manifest.seed
    env = os.environ.get("JUMPCONV_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"JUMPCONV_SEED is not an integer: {env!r}") from exc
    else:
        seed = doc.get("run", {}).get("seed", 0)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return seed


# -------------------------------------------------------------------- reports


def _row(scenario_id: str, mode: str, p: float, q: float, q_prime: float, n_paths: int,
         lhs, lhs_se, rhs, rhs_se, ratio, ci_lo, ci_hi) -> dict:
    return {
        "scenario_id": scenario_id, "mode": mode, "p": float(p), "q": float(q),
        "q_prime": float(q_prime), "n_paths": int(n_paths),
        "lhs_mean": float(lhs), "lhs_stderr": float(lhs_se),
        "rhs_mean": float(rhs), "rhs_stderr": float(rhs_se),
        "ratio_hat": float(ratio), "ratio_ci_lo": float(ci_lo), "ratio_ci_hi": float(ci_hi),
        "wall_ms": 0,
    }


def _row_from_inequality(scenario_id: str, rep) -> dict:
    return _row(scenario_id, rep.mode, rep.p, rep.q, rep.q_prime, rep.n_paths,
                rep.lhs_mean, rep.lhs_stderr, rep.rhs_mean, rep.rhs_stderr,
                rep.ratio_hat, rep.ratio_ci[0], rep.ratio_ci[1])


def _row_from_layer_cake(scenario_id: str, rep, sp: SmoothSpace) -> dict:
    mid = 0.5 * (rep.tail_lower + rep.tail_upper)
    se = 0.5 * (rep.tail_upper - rep.tail_lower)
    ratio = rep.direct_mean / mid if mid > 0 else 0.0
    lo = rep.direct_mean / rep.tail_upper if rep.tail_upper > 0 else 0.0
    hi = rep.direct_mean / rep.tail_lower if rep.tail_lower > 0 else ratio
    return _row(scenario_id, "layer_cake", sp.p, sp.q, rep.q_prime, rep.n_paths,
                rep.direct_mean, rep.direct_stderr, mid, se, ratio, lo, hi)


def _row_from_step_approx(scenario_id: str, rep, sp: SmoothSpace, n_paths: int) -> dict:
    ratios = [x for x in rep.ratio if x > 0]
    lo, hi = (min(ratios), max(ratios)) if ratios else (0.0, 0.0)
    return _row(scenario_id, "step_approx", rep.p, sp.q, rep.p, n_paths,
                rep.mc_distance[-1], rep.mc_stderr[-1], rep.mp_distance[-1], 0.0,
                rep.est_constant, lo, hi)


def run_experiment_rows(doc: dict, scn: ConvolutionScenario, seed: int,
                        mode: str, q_values, scenario_id: str) -> list[dict]:
    """All report rows for one scenario; one row per q' in ascending config order."""
    run = doc.get("run", {})
    n_paths = _require(run, "n_paths", "run")
    exp = doc.get("experiment", {})
    grid = run.get("grid", 256)
    t_eval = run.get("t_eval")

    def cfg(qp, **kw):
        return ExperimentConfig(
            scenario=scn, q_prime=float(qp), n_paths=n_paths, base_seed=seed,
            t_eval=t_eval, grid=grid, **kw,
        )

    try:
        base = cfg(q_values[0])
    except ValueError as exc:
        raise ConfigError(f"[run] {exc}") from exc
    ens = Ensemble.sample(scn.ms, scn.horizon, n_paths, seed)
    stats = None
    if mode in MODES or mode == "layer_cake":
        stats = path_statistics(base, ens)

    rows = []
    for qp in q_values:
        if mode in MODES:
            rep = inequality_report(cfg(qp), mode, ens, stats=stats)
            rows.append(_row_from_inequality(scenario_id, rep))
        elif mode == "stopped":
            lam = _require(exp, "lambda_threshold", "experiment")
            rep = stopped_report(cfg(qp, lambda_threshold=float(lam)), ens)
            rows.append(_row_from_inequality(scenario_id, rep))
        elif mode == "higher_moment":
            level = _require(exp, "moment_level", "experiment")
            rep = higher_moment_report(cfg(qp, moment_level=level), ens)
            rows.append(_row_from_inequality(scenario_id, rep))
        elif mode == "isometry":
            rep = ito_isometry_report(cfg(qp), ens)
            rows.append(_row_from_inequality(scenario_id, rep))
        elif mode == "layer_cake":
            rep = layer_cake_check(cfg(qp), n_levels=exp.get("n_levels", 128),
                                   ensemble=ens, stats=stats)
            rows.append(_row_from_layer_cake(scenario_id, rep, scn.sp))
        elif mode == "step_approx":
            refinements = tuple(exp.get("refinements", [1, 2, 3, 4, 5]))
            rep = step_approx_convergence(cfg(qp), refinements, ensemble=ens)
            rows.append(_row_from_step_approx(scenario_id, rep, scn.sp, n_paths))
        else:
            raise ConfigError(f"[experiment] unknown mode '{mode}'")
    return rows


# -------------------------------------------------------------------- writers


def _write_csv(path: Path, rows: list[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(SUMMARY_FIELDS)
        for row in rows:
            writer.writerow([_render(row[k]) for k in SUMMARY_FIELDS])


def _render(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_json(path: Path, rows: list[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, allow_nan=False)
        fh.write("\n")


# ------------------------------------------------------------------- commands


def cmd_sample(manifest: RunManifest) -> int:
    doc = load_config(manifest.config)
    ms = build_markspace(doc)
    tbl = _section(doc, "sample")
    n_paths = _require(tbl, "n_paths", "sample")
    horizon = float(_require(tbl, "horizon", "sample"))
    if n_paths < 1 or horizon <= 0:
        raise ConfigError("[sample] n_paths and horizon must be positive")
    seed = resolve_seed(manifest, doc)
    t0 = time.perf_counter()
    manifest.out.mkdir(parents=True, exist_ok=True)
    for i in range(n_paths):
        path = sample_path(ms, horizon, make_rng(substream(seed, i)))
        with open(manifest.out / f"path_{i:04d}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(["time", "mark"])
            for t, k in zip(path.times, path.marks):
                writer.writerow([repr(float(t)), ms.marks[int(k)]])
    print(f"[jumpconv] sample: {n_paths} paths in {time.perf_counter() - t0:.2f}s",
          file=sys.stderr)
    return 0


def _q_list(exp: dict) -> list[float]:
    qp = _require(exp, "q_prime", "experiment")
    values = [float(x) for x in (qp if isinstance(qp, list) else [qp])]
    if not values:
        raise ConfigError("[experiment] q_prime list is empty")
    return values


def cmd_verify(manifest: RunManifest) -> int:
    doc = load_config(manifest.config)
    ms = build_markspace(doc)
    scn = build_scenario(doc, ms)
    seed = resolve_seed(manifest, doc)
    exp = _section(doc, "experiment")
    mode = _require(exp, "mode", "experiment")
    t0 = time.perf_counter()
    rows = run_experiment_rows(doc, scn, seed, mode, _q_list(exp), scn.label)
    manifest.out.mkdir(parents=True, exist_ok=True)
    _write_csv(manifest.out / "verify.csv", rows)
    _write_json(manifest.out / "summary.json", rows)
    print(f"[jumpconv] verify: {len(rows)} rows in {time.perf_counter() - t0:.2f}s",
          file=sys.stderr)
    return 0


def _sweep_grid(doc: dict):
    tbl = _section(doc, "sweep")
    gens = tbl.get("generator", [])
    fields = tbl.get("field", [])
    spaces = tbl.get("space") or ([doc["space"]] if "space" in doc else [])
    q_values = [float(x) for x in tbl.get("q_prime", [])]
    modes = tbl.get("modes", ["thm4_9"])
    if not (gens and fields and spaces and q_values and modes):
        raise ConfigError("empty sweep grid: need generator, field, space, q_prime, modes")
    grid = []
    for k, sp_tbl in enumerate(spaces):
        for i, gen_tbl in enumerate(gens):
            for j, fld_tbl in enumerate(fields):
                sid = f"s{k}-g{i}-f{j}"
                grid.append((sid, sp_tbl, gen_tbl, fld_tbl))
    return grid, q_values, modes


def _sweep_one(doc, ms, sid, sp_tbl, gen_tbl, fld_tbl, seed, q_values, modes):
    sp = build_space(sp_tbl)
    scn = build_scenario(doc, ms, sp=sp, gen_tbl=gen_tbl, fld_tbl=fld_tbl, label=sid)
    rows = []
    for mode in modes:
        rows.extend(run_experiment_rows(doc, scn, seed, mode, q_values, sid))
    return rows


def cmd_sweep(manifest: RunManifest) -> int:
    doc = load_config(manifest.config)
    ms = build_markspace(doc)
    seed = resolve_seed(manifest, doc)
    grid, q_values, modes = _sweep_grid(doc)
    t0 = time.perf_counter()
    parts = manifest.out / "sweep_parts"
    parts.mkdir(parents=True, exist_ok=True)

    done: dict[str, list[dict]] = {}
    todo = []
    for sid, sp_tbl, gen_tbl, fld_tbl in grid:
        part = parts / f"{sid}.json"
        if part.exists():
            with open(part, encoding="utf-8") as fh:
                done[sid] = json.load(fh)
        else:
            todo.append((sid, sp_tbl, gen_tbl, fld_tbl))

    def job(args):
        sid, sp_tbl, gen_tbl, fld_tbl = args
        return sid, _sweep_one(doc, ms, sid, sp_tbl, gen_tbl, fld_tbl, seed, q_values, modes)

    if manifest.jobs > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=manifest.jobs) as pool:
            results = list(pool.map(job, todo))
    else:
        results = [job(item) for item in todo]
    # single emitter: completed scenarios land on disk only here, in grid order
    for sid, rows in results:
        _write_json(parts / f"{sid}.json", rows)
        done[sid] = rows

    all_rows = [row for sid, *_ in grid for row in done[sid]]
    _write_csv(manifest.out / "sweep.csv", all_rows)
    print(
        f"[jumpconv] sweep: {len(all_rows)} rows "
        f"({len(todo)} scenarios run, {len(grid) - len(todo)} resumed) "
        f"in {time.perf_counter() - t0:.2f}s",
        file=sys.stderr,
    )
    return 0


# ----------------------------------------------------------------- entrypoint


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jumpconv",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in ("sample", "verify", "sweep"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, type=Path)
        cmd.add_argument("--out", required=True, type=Path)
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--jobs", type=int, default=1)
    return parser


_DISPATCH = {"sample": cmd_sample, "verify": cmd_verify, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        manifest = RunManifest(
            subcommand=args.subcommand, config=args.config, out=args.out,
            seed=args.seed, jobs=args.jobs,
        )
        return _DISPATCH[manifest.subcommand](manifest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except HypothesisError as exc:
        print(f"hypothesis violation: {exc}", file=sys.stderr)
        return 4
    except FloatingPointError as exc:
        print(f"non-finite statistic: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
