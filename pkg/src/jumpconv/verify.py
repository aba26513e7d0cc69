"""Monte Carlo harness for the maximal-moment bounds on jump convolutions.

Every experiment estimates both sides of one inequality on a shared seeded
ensemble of event streams (path i always comes from substream(base_seed, i)),
so ratios of the two sides carry no cross-side sampling noise.  The left side
is always a supremum statistic of the convolution over a time lattice joined
with the exact event times; the right side is either the random event-sum
integral of |xi|^p (computed exactly per path) or its deterministic intensity
counterpart (computed by quadrature once).

The estimated ratios are data, not assertions: the bounds hold with an
existential constant, so the harness reports finiteness and stability and
leaves magnitude thresholds to the caller.  Reductions run in ascending path
order and reports carry wall_time = 0.0 so that identical configurations
produce bit-identical results; timing belongs to the runner's log, not here.

Scenarios with a unitary spectral factorization are evaluated by a pooled
coordinatewise scan across all paths at once; anything else falls back to the
per-path engine.  The two routes agree to quadrature tolerance and the route
choice is a deterministic function of the scenario, never of the data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .prm import MarkSpace, PoissonPath, make_rng, sample_path, substream
from .sconv import (
    ConvolutionScenario,
    _segment_compensator_factory,
    _segment_compensators,
    convolution_path,
)
from .sgp import Generator
from .sint import (
    DEFAULT_QUAD,
    FieldIntegrand,
    FunctionField,
    QuadConfig,
    _comp_integral,
    ls_integral_nu,
    norm_power_rule,
    step_field,
)
from .space import SmoothSpace, norm

__all__ = [
    "MODES",
    "HypothesisError",
    "ExperimentConfig",
    "InequalityReport",
    "LayerCakeReport",
    "StepApproxReport",
    "Ensemble",
    "PathStats",
    "path_statistics",
    "field_integral_ensemble",
    "maximal_lhs",
    "maximal_rhs_N",
    "maximal_rhs_nu",
    "inequality_report",
    "stopped_report",
    "layer_cake_bounds",
    "layer_cake_check",
    "higher_moment_report",
    "ito_isometry_report",
    "step_approx_convergence",
    "dyadic_step_approximant",
]

MODES = ("thm4_6", "thm4_9", "cor4_10")

# two-sided 99% normal quantile
_Z99 = 2.5758293035489004


class HypothesisError(ValueError):
    """An experiment was configured outside the hypothesis of its bound."""


# ------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a certified scenario plus estimator knobs.

    t_eval defaults to the scenario horizon; grid counts the uniform lattice
    cells used for the supremum (event times are always added on top).
    """

    scenario: ConvolutionScenario
    q_prime: float
    n_paths: int
    base_seed: int
    t_eval: float | None = None
    lambda_threshold: float | None = None
    moment_level: int | None = None
    grid: int = 256

    def __post_init__(self):
        if not (np.isfinite(self.q_prime) and self.q_prime > 0.0):
            raise ValueError("q_prime must be positive and finite")
        if int(self.n_paths) < 1:
            raise ValueError("n_paths must be at least 1")
        if int(self.grid) < 2:
            raise ValueError("grid must have at least 2 cells")
        if self.t_eval is not None and not (0.0 < self.t_eval <= self.scenario.horizon):
            raise ValueError("t_eval must lie in (0, horizon]")
        if self.lambda_threshold is not None and not self.lambda_threshold > 0.0:
            raise ValueError("lambda_threshold must be positive")
        if self.moment_level is not None and int(self.moment_level) < 1:
            raise ValueError("moment_level must be a positive integer")

    @property
    def eval_time(self) -> float:
        return self.scenario.horizon if self.t_eval is None else float(self.t_eval)


@dataclass(frozen=True)
class InequalityReport:
    """Two-sided estimate of one bound; all statistics finite by contract.

    ratio_hat = lhs_mean / rhs_mean estimates the (existential) constant for
    this scenario; ratio_ci is a 99% normal interval from the common-random-
    number delta method.  wall_time is fixed to 0.0 inside the report so that
    equal configurations compare bit-identically.
    """

    mode: str
    p: float
    q: float
    q_prime: float
    lhs_mean: float
    lhs_stderr: float
    rhs_mean: float
    rhs_stderr: float
    ratio_hat: float
    ratio_ci: tuple
    n_paths: int
    wall_time: float = 0.0
    extras: dict = dc_field(default_factory=dict)


@dataclass(frozen=True)
class LayerCakeReport:
    """Tail-integral moment estimate bracketed against the direct mean."""

    q_prime: float
    n_paths: int
    n_levels: int
    direct_mean: float
    direct_stderr: float
    tail_lower: float
    tail_upper: float
    consistent: bool
    wall_time: float = 0.0


@dataclass(frozen=True)
class StepApproxReport:
    """Step-approximant distances per dyadic level and the implied constant."""

    levels: tuple
    mp_distance: tuple
    mc_distance: tuple
    mc_stderr: tuple
    ratio: tuple
    est_constant: float
    p: float
    n_paths: int
    wall_time: float = 0.0


# ------------------------------------------------------------------ ensembles


@dataclass(frozen=True)
class Ensemble:
    """M seeded event streams, stored flat in ascending path-index order.

    Path i is exactly sample_path(ms, horizon, make_rng(substream(base_seed,
    i))); the flat layout keeps every vectorized reduction in a fixed order.
    """

    ms: MarkSpace
    horizon: float
    n_paths: int
    base_seed: int
    times: np.ndarray
    marks: np.ndarray
    offsets: np.ndarray

    @classmethod
    def sample(cls, ms: MarkSpace, horizon: float, n_paths: int, base_seed: int) -> "Ensemble":
        times, marks = [], []
        offsets = np.zeros(int(n_paths) + 1, dtype=np.int64)
        for i in range(int(n_paths)):
            p = sample_path(ms, horizon, make_rng(substream(base_seed, i)))
            times.append(p.times)
            marks.append(p.marks)
            offsets[i + 1] = offsets[i] + p.n_events
        t = np.concatenate(times) if times else np.empty(0)
        z = np.concatenate(marks) if marks else np.empty(0, dtype=np.int64)
        return cls(ms, float(horizon), int(n_paths), int(base_seed), t, z, offsets)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def path_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_paths), self.counts)

    def path(self, i: int) -> PoissonPath:
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return PoissonPath(
            self.ms,
            self.horizon,
            self.times[sl],
            self.marks[sl],
            seed=substream(self.base_seed, i),
        )


def _resolve_ensemble(cfg: ExperimentConfig, ensemble) -> Ensemble:
    scn = cfg.scenario
    if ensemble is None:
        return Ensemble.sample(scn.ms, scn.horizon, cfg.n_paths, cfg.base_seed)
    same = (
        ensemble.n_paths == cfg.n_paths
        and ensemble.base_seed == cfg.base_seed
        and ensemble.horizon == scn.horizon
        and ensemble.ms.marks == scn.ms.marks
        and np.array_equal(ensemble.ms.weights, scn.ms.weights)
    )
    if not same:
        raise ValueError("ensemble was sampled under a different configuration")
    return ensemble


# -------------------------------------------------------------- pooled scans


def _lattice(t_eval: float, grid: int, breakpoints) -> np.ndarray:
    base = np.linspace(0.0, t_eval, int(grid) + 1)
    inner = [float(b) for b in breakpoints if 0.0 < b < t_eval]
    if inner:
        base = np.unique(np.concatenate([base, np.asarray(inner)]))
    return base


def _scan_spectral(scn, lattice, t_ev, xi_ev, pidx, offsets, cut, quad):
    """Sup norms and terminal values for all paths via coordinatewise flows.

    Lattice values satisfy the one-step recursion u_j = e^{w h} u_{j-1} -
    comp_j + (flowed jumps inside the step); because the flow is linear the
    jump contributions superpose, so the whole ensemble advances together.
    Event-time values flow from the preceding lattice node; the rare events
    sharing a step with an earlier event of the same path get their
    predecessors added by a short exact loop.
    """
    sp = scn.sp
    basis = scn._basis
    w = basis.w
    d = w.size
    M = offsets.size - 1
    L = lattice.size
    h_ref = quad.h_max(scn.horizon)

    comp = _segment_compensator_factory(scn, h_ref)
    comp_seg = np.zeros((L, d), dtype=complex)
    for j in range(1, L):
        comp_seg[j] = comp(float(lattice[j - 1]), float(lattice[j]))
    flow_seg = np.exp(w[None, :] * np.diff(lattice)[:, None])

    seg = np.searchsorted(lattice, t_ev, side="left")
    xi_hat = basis.to_coords(xi_ev).astype(complex)
    node_contrib = np.exp(w[None, :] * (lattice[seg] - t_ev)[:, None]) * xi_hat
    part = _segment_compensators(scn, lattice[seg - 1], t_ev)
    flow_from_node = np.exp(w[None, :] * (t_ev - lattice[seg - 1])[:, None])

    # exact handling of events preceded by another event in the same step
    pred = np.zeros_like(xi_hat)
    if t_ev.size > 1:
        tied = np.flatnonzero((pidx[1:] == pidx[:-1]) & (seg[1:] == seg[:-1])) + 1
        for e in tied:
            e2 = e - 1
            acc = np.zeros(d, dtype=complex)
            while e2 >= 0 and pidx[e2] == pidx[e] and seg[e2] == seg[e]:
                acc += np.exp(w * (t_ev[e] - t_ev[e2])) * xi_hat[e2]
                e2 -= 1
            pred[e] = acc

    sup = np.zeros(M)
    terminal = np.zeros((M, d))
    ev_right = np.empty(t_ev.size)
    chunk = max(1, int(2_500_000 / (L * d)))
    for s0 in range(0, M, chunk):
        s1 = min(s0 + chunk, M)
        esl = slice(offsets[s0], offsets[s1])
        U = np.zeros((s1 - s0, L, d), dtype=complex)
        np.add.at(U, (pidx[esl] - s0, seg[esl]), node_contrib[esl])
        for j in range(1, L):
            U[:, j] += U[:, j - 1] * flow_seg[j - 1] - comp_seg[j]
        vals = basis.from_coords(U)
        norms = np.asarray(norm(sp, vals))
        masked = np.where(lattice[None, :] <= cut[s0:s1, None], norms, 0.0)
        sup_chunk = masked.max(axis=1)
        terminal[s0:s1] = vals[:, -1, :]
        if esl.stop > esl.start:
            u_hat = (
                flow_from_node[esl] * U[pidx[esl] - s0, seg[esl] - 1]
                - part[esl]
                + xi_hat[esl]
                + pred[esl]
            )
            ev_norm = np.asarray(norm(sp, basis.from_coords(u_hat)))
            ev_right[esl] = ev_norm
            ev_masked = np.where(t_ev[esl] <= cut[pidx[esl]], ev_norm, 0.0)
            np.maximum.at(sup_chunk, pidx[esl] - s0, ev_masked)
        sup[s0:s1] = sup_chunk
    return sup, terminal, ev_right


def _scan_dense(scn, lattice, ens, cut, t_eval, quad):
    """Per-path engine fallback for scenarios without a spectral route."""
    sp = scn.sp
    sup = np.zeros(ens.n_paths)
    terminal = np.zeros((ens.n_paths, sp.d))
    ev_right = np.empty(int(np.count_nonzero(ens.times <= t_eval)))
    pos = 0
    for i in range(ens.n_paths):
        cp = convolution_path(scn, ens.path(i), grid=lattice, quad=quad)
        norms = np.asarray(norm(sp, cp.values))
        sup[i] = norms[cp.times <= cut[i]].max()
        terminal[i] = cp.value_at(t_eval)
        kept = cp.jump_times <= t_eval
        n_kept = int(np.count_nonzero(kept))
        if n_kept:
            idx = np.searchsorted(cp.times, cp.jump_times[kept])
            ev_right[pos : pos + n_kept] = norms[idx]
        pos += n_kept
    return sup, terminal, ev_right


# ------------------------------------------------------------ path statistics


@dataclass(frozen=True)
class PathStats:
    """Per-path statistics at common seeds; every array has length n_paths.

    sup_norm is the supremum of |u| over the lattice joined with the path's
    event times, restricted to s <= min(t_eval, tau); control is the event sum
    of |xi|^p over the same window and control_full the one with tau ignored.
    tau is the first time within (0, t_eval] at which the running event sum
    exceeds lambda^p (+inf when it never does; the crossing is found by an
    exact scan over event times, where every increment of this pure-jump
    process lives).  pre_tau is the control just before the crossing (the
    full control when there is none) and cross_mass the crossing increment.
    """

    sup_norm: np.ndarray
    terminal: np.ndarray
    control: np.ndarray
    control_full: np.ndarray
    tau: np.ndarray
    pre_tau: np.ndarray
    cross_mass: np.ndarray
    t_eval: float


def path_statistics(
    cfg: ExperimentConfig,
    ensemble: Ensemble | None = None,
    stop_level: float | None = None,
    quad: QuadConfig = DEFAULT_QUAD,
) -> PathStats:
    """Scan the ensemble once; stopping is a pure masking of the same scan.

    With stop_level None the cut masks are identically true, so a stopped run
    whose threshold is never crossed reproduces the unstopped statistics bit
    for bit (same floats, same reduction order).
    """
    scn = cfg.scenario
    sp = scn.sp
    ens = _resolve_ensemble(cfg, ensemble)
    t_eval = cfg.eval_time
    M = ens.n_paths

    keep = ens.times <= t_eval
    t_ev = ens.times[keep]
    z_ev = ens.marks[keep]
    pidx = ens.path_index()[keep]
    counts = np.bincount(pidx, minlength=M)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    xi_ev = scn.field.values(t_ev, z_ev) if t_ev.size else np.zeros((0, sp.d))
    with np.errstate(over="ignore"):
        # overflow lands as inf and is rejected by the finiteness checks below
        mass = np.asarray(norm(sp, xi_ev), dtype=float) ** sp.p

    tau = np.full(M, np.inf)
    pre_tau = None
    cross_mass = np.zeros(M)
    if stop_level is not None:
        thresh = float(stop_level) ** sp.p
        pre_tau = np.zeros(M)
        for i in range(M):
            sl = slice(offsets[i], offsets[i + 1])
            cum = np.cumsum(mass[sl])
            hit = np.flatnonzero(cum > thresh)
            if hit.size:
                k = int(hit[0])
                tau[i] = t_ev[offsets[i] + k]
                pre_tau[i] = cum[k - 1] if k else 0.0
                cross_mass[i] = mass[sl][k]
            else:
                pre_tau[i] = cum[-1] if cum.size else 0.0
    cut = np.minimum(tau, t_eval)

    control = np.zeros(M)
    in_cut = t_ev <= cut[pidx]
    np.add.at(control, pidx[in_cut], mass[in_cut])
    control_full = np.zeros(M)
    np.add.at(control_full, pidx, mass)
    if pre_tau is None:
        pre_tau = control_full

    lattice = _lattice(t_eval, cfg.grid, scn.field.breakpoints)
    if scn.spectral:
        sup, terminal, _ = _scan_spectral(scn, lattice, t_ev, xi_ev, pidx, offsets, cut, quad)
    else:
        sup, terminal, _ = _scan_dense(scn, lattice, ens, cut, t_eval, quad)

    for name, arr in (("sup", sup), ("control", control_full)):
        if not np.all(np.isfinite(arr)):
            i = int(np.argmin(np.isfinite(arr)))
            raise FloatingPointError(
                f"non-finite {name} statistic at path index {i} "
                f"(seed substream({ens.base_seed}, {i}))"
            )
    return PathStats(sup, terminal, control, control_full, tau, pre_tau, cross_mass, t_eval)


def field_integral_ensemble(
    ens: Ensemble, field: FieldIntegrand, t_eval: float, quad: QuadConfig = DEFAULT_QUAD
) -> np.ndarray:
    """I_t(xi) for every path at once: masked event sums minus one compensator."""
    if not 0.0 < t_eval <= ens.horizon:
        raise ValueError("t_eval must lie in (0, horizon]")
    field._require_marks(ens.ms)
    keep = ens.times <= t_eval
    out = np.zeros((ens.n_paths, field.dim))
    if np.any(keep):
        vals = field.values(ens.times[keep], ens.marks[keep])
        np.add.at(out, ens.path_index()[keep], vals)
    comp = _comp_integral(ens.ms, field, 0.0, float(t_eval), quad.h_max(ens.horizon))
    return out - np.asarray(comp)[None, :]


# ------------------------------------------------------------------ reports


def _mean_se(x: np.ndarray) -> tuple:
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return m, se


def _require_finite(x: np.ndarray, what: str, base_seed: int):
    ok = np.isfinite(x)
    if not np.all(ok):
        i = int(np.argmin(ok))
        raise FloatingPointError(
            f"non-finite {what} at path index {i} (seed substream({base_seed}, {i}))"
        )


def _ratio_and_ci(X: np.ndarray, Y, lhs_mean: float, rhs_mean: float) -> tuple:
    """Delta-method 99% CI for mean(X)/mean(Y); Y None means deterministic rhs."""
    if rhs_mean == 0.0:
        return 0.0, (0.0, 0.0)
    ratio = lhs_mean / rhs_mean
    if X.size < 2:
        return ratio, (ratio, ratio)
    resid = X if Y is None else X - ratio * Y
    var = float(np.var(resid, ddof=1)) / X.size / rhs_mean**2
    half = _Z99 * math.sqrt(max(var, 0.0))
    return ratio, (ratio - half, ratio + half)


def _mom_ratio(X: np.ndarray, Y, rhs_value: float):
    """Median-of-means ratio over contiguous ascending blocks (heavy tails)."""
    M = X.size
    if M < 8:
        return None
    k = 16 if M >= 64 else max(2, M // 4)
    edges = np.linspace(0, M, k + 1).astype(int)
    ratios = []
    for j in range(k):
        sl = slice(edges[j], edges[j + 1])
        den = float(np.mean(Y[sl])) if Y is not None else rhs_value
        ratios.append(float(np.mean(X[sl])) / den if den != 0.0 else 0.0)
    return float(np.median(ratios)), k


def _build_report(mode, sp, q_prime, X, Y, rhs_pair, n_paths, extras) -> InequalityReport:
    lhs_mean, lhs_se = _mean_se(X)
    rhs_mean, rhs_se = rhs_pair
    ratio, ci = _ratio_and_ci(X, Y, lhs_mean, rhs_mean)
    if q_prime / sp.p > 2.0:
        mom = _mom_ratio(X, Y, rhs_mean)
        if mom is not None:
            extras = dict(extras, mom_ratio=mom[0], mom_blocks=mom[1])
    return InequalityReport(
        mode=mode,
        p=float(sp.p),
        q=float(sp.q),
        q_prime=float(q_prime),
        lhs_mean=lhs_mean,
        lhs_stderr=lhs_se,
        rhs_mean=float(rhs_mean),
        rhs_stderr=float(rhs_se),
        ratio_hat=float(ratio),
        ratio_ci=(float(ci[0]), float(ci[1])),
        n_paths=int(n_paths),
        extras=extras,
    )


def _base_extras(cfg: ExperimentConfig) -> dict:
    scn = cfg.scenario
    return {
        "scenario": scn.label,
        "r": float(scn.sp.r),
        "d": int(scn.sp.d),
        "t_eval": float(cfg.eval_time),
    }


def maximal_lhs(
    cfg: ExperimentConfig, ensemble: Ensemble | None = None, stats: PathStats | None = None
) -> tuple:
    """(mean, stderr) of sup_{s<=t} |u(s)|^{q'} over the seeded ensemble."""
    st = stats if stats is not None else path_statistics(cfg, ensemble)
    X = st.sup_norm ** cfg.q_prime
    _require_finite(X, "maximal statistic", cfg.base_seed)
    return _mean_se(X)


def maximal_rhs_N(
    cfg: ExperimentConfig, ensemble: Ensemble | None = None, stats: PathStats | None = None
) -> tuple:
    """(mean, stderr) of the pathwise-exact event integral to the power q'/p."""
    st = stats if stats is not None else path_statistics(cfg, ensemble)
    Y = st.control_full ** (cfg.q_prime / cfg.scenario.sp.p)
    _require_finite(Y, "event-integral statistic", cfg.base_seed)
    return _mean_se(Y)


def maximal_rhs_nu(cfg: ExperimentConfig, quad: QuadConfig = DEFAULT_QUAD) -> float:
    """Deterministic intensity-side bound; only defined on the range $0<q'\\leq p$."""
    scn = cfg.scenario
    if cfg.q_prime > scn.sp.p:
        raise HypothesisError(
            f"the intensity-side bound assumes \"$0<q'\\leq p$\"; "
            f"got q' = {cfg.q_prime:g} > p = {scn.sp.p:g}"
        )
    rule = norm_power_rule(scn.sp, scn.field, scn.sp.p)
    base = ls_integral_nu(scn.ms, rule, cfg.eval_time, quad, horizon=scn.horizon)
    return float(base ** (cfg.q_prime / scn.sp.p))


def inequality_report(
    cfg: ExperimentConfig,
    which: str,
    ensemble: Ensemble | None = None,
    stats: PathStats | None = None,
) -> InequalityReport:
    """Estimate both sides of one maximal bound with common random numbers.

    thm4_6 pairs the supremum with the random event integral on q' >= q;
    thm4_9 does the same for every positive q'; cor4_10 pairs it with the
    deterministic intensity integral on q' <= p.  Exponents outside the
    stated range raise HypothesisError naming the violated hypothesis.  A
    precomputed stats from path_statistics on the same scenario, seeds and
    evaluation time may be passed to share one scan across modes.
    """
    if which not in MODES:
        raise ValueError(f"unknown mode {which!r}; expected one of {MODES}")
    scn = cfg.scenario
    sp = scn.sp
    if which == "thm4_6" and cfg.q_prime < sp.q:
        raise HypothesisError(
            f"mode thm4_6 assumes \"$q'\\geq q$\"; got q' = {cfg.q_prime:g} < q = {sp.q:g}"
        )
    if which == "cor4_10" and cfg.q_prime > sp.p:
        raise HypothesisError(
            f"mode cor4_10 assumes \"$0<q'\\leq p$\"; got q' = {cfg.q_prime:g} > p = {sp.p:g}"
        )
    if stats is None:
        stats = path_statistics(cfg, ensemble)
    elif stats.sup_norm.size != cfg.n_paths or stats.t_eval != cfg.eval_time:
        raise ValueError("stats were computed under a different configuration")
    X = stats.sup_norm ** cfg.q_prime
    _require_finite(X, "maximal statistic", cfg.base_seed)
    extras = _base_extras(cfg)
    extras["q_gap"] = float(sp.q - cfg.q_prime)
    if which == "cor4_10":
        rhs = maximal_rhs_nu(cfg)
        return _build_report(which, sp, cfg.q_prime, X, None, (rhs, 0.0), cfg.n_paths, extras)
    Y = stats.control_full ** (cfg.q_prime / sp.p)
    _require_finite(Y, "event-integral statistic", cfg.base_seed)
    return _build_report(which, sp, cfg.q_prime, X, Y, _mean_se(Y), cfg.n_paths, extras)


def stopped_report(cfg: ExperimentConfig, ensemble: Ensemble | None = None) -> InequalityReport:
    """Maximal bound truncated at the first threshold crossing of the control.

    tau is the first event time at which the running event integral of
    |xi|^p exceeds lambda^p; both sides are then evaluated on (0, t ^ tau]
    with the supremum exponent q.  The proof's bookkeeping facts are verified
    pathwise and exactly: the control strictly before tau never exceeds
    lambda^p, the crossing value decomposes as its left limit plus the
    crossing increment, and truncation never increases the control.  A
    threshold above every crossing reproduces the unstopped statistics bit
    for bit.
    """
    if cfg.lambda_threshold is None:
        raise ValueError("stopped experiments need lambda_threshold")
    scn = cfg.scenario
    sp = scn.sp
    lam = float(cfg.lambda_threshold)
    stats = path_statistics(cfg, ensemble, stop_level=lam)
    thresh = lam**sp.p

    crossed = np.isfinite(stats.tau)
    if not np.all(stats.pre_tau <= thresh):
        raise AssertionError("control exceeded lambda^p strictly before tau")
    lhs_at_tau = stats.pre_tau[crossed] + stats.cross_mass[crossed]
    if not np.array_equal(stats.control[crossed], lhs_at_tau):
        raise AssertionError("left-limit bookkeeping failed at tau")
    if np.any(stats.control > stats.control_full):
        raise AssertionError("truncation increased the control integral")

    X = stats.sup_norm ** sp.q
    _require_finite(X, "stopped maximal statistic", cfg.base_seed)
    Y = stats.control ** (sp.q / sp.p)
    extras = _base_extras(cfg)
    extras["lambda"] = lam
    extras["tau_finite_frac"] = float(np.mean(crossed))
    extras["overshoot_max"] = float(np.max(stats.control - thresh, initial=0.0))
    return _build_report("stopped", sp, sp.q, X, Y, _mean_se(Y), cfg.n_paths, extras)


# ------------------------------------------------------------ layer cake


def layer_cake_bounds(samples, q_prime: float, n_levels: int) -> tuple:
    """(lower, upper, direct) for E X^{q'} via the tail integral.

    The sums integrate q' lambda^{q'-1} S(lambda) d lambda exactly on each
    cell of a quantile-spaced partition, bounding the nonincreasing empirical
    survival S by its cell-edge values; the direct estimator always lies in
    [lower, upper] up to roundoff.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("samples must be a nonempty 1-d array")
    if np.any(~np.isfinite(x)) or np.any(x < 0.0):
        raise ValueError("samples must be finite and nonnegative")
    if not q_prime > 0.0:
        raise ValueError("q_prime must be positive")
    if int(n_levels) < 2:
        raise ValueError("need at least 2 levels")
    xs = np.sort(x)
    levels = np.quantile(xs, np.linspace(0.0, 1.0, int(n_levels)))
    levels = np.unique(np.concatenate([[0.0], levels]))
    surv = (xs.size - np.searchsorted(xs, levels, side="right")) / xs.size
    dF = np.diff(levels**q_prime)
    lower = float(np.sum(surv[1:] * dF))
    upper = float(np.sum(surv[:-1] * dF))
    direct = float(np.mean(xs**q_prime))
    return lower, upper, direct


def layer_cake_check(
    cfg: ExperimentConfig,
    n_levels: int = 128,
    ensemble: Ensemble | None = None,
    stats: PathStats | None = None,
) -> LayerCakeReport:
    """Bracket the direct sup-moment estimate by its own tail integral."""
    if int(n_levels) < 100:
        raise ValueError("layer-cake check needs at least 100 levels")
    if stats is None:
        stats = path_statistics(cfg, ensemble)
    X = stats.sup_norm ** cfg.q_prime
    _require_finite(X, "maximal statistic", cfg.base_seed)
    lower, upper, direct = layer_cake_bounds(stats.sup_norm, cfg.q_prime, n_levels)
    _, se = _mean_se(X)
    tol = 1e-12 * (1.0 + abs(direct))
    return LayerCakeReport(
        q_prime=float(cfg.q_prime),
        n_paths=int(cfg.n_paths),
        n_levels=int(n_levels),
        direct_mean=direct,
        direct_stderr=se,
        tail_lower=lower,
        tail_upper=upper,
        consistent=bool(lower - tol <= direct <= upper + tol),
    )


# ------------------------------------------------------- higher moments


def _scalar_flat_variant(cfg: ExperimentConfig) -> ExperimentConfig:
    """Same noise, scalar lens: identity semigroup acting on |xi| in R."""
    scn = cfg.scenario
    parent_field = scn.field
    parent_sp = scn.sp

    def fn(times, k):
        vals = parent_field.mark_values(np.asarray(times, dtype=float), int(k))
        return np.asarray(norm(parent_sp, vals), dtype=float)[:, None]

    scalar_field = FunctionField(
        fn, dim=1, n_marks=scn.ms.n_marks, breakpoints=parent_field.breakpoints,
        label=(scn.label + "/scalar") if scn.label else "scalar",
    )
    sub = ConvolutionScenario(
        scn.ms,
        SmoothSpace(d=1, r=2.0, q=2.0, p=parent_sp.p),
        Generator.identity(1),
        scalar_field,
        scn.horizon,
        label=scalar_field.label,
        certify=False,
    )
    return replace(cfg, scenario=sub)


def higher_moment_report(
    cfg: ExperimentConfig, ensemble: Ensemble | None = None
) -> InequalityReport:
    """Iterated bound: E sup |u|^{p^n} against the n-term intensity sum.

    The right side is the exact sum over k = 1..n of the intensity integral
    of |xi|^{p^k} raised to p^{n-k}.  A scalar sub-report with the identity
    semigroup and the real field |xi| runs on the same ensemble and lands in
    extras["scalar_identity"].
    """
    if cfg.moment_level is None:
        raise ValueError("higher-moment experiments need moment_level")
    n = int(cfg.moment_level)
    if n > 4:
        raise ValueError(
            "moment_level above 4 overflows the float range through the p^n powers"
        )
    scn = cfg.scenario
    sp = scn.sp
    q_n = sp.p**n
    ens = _resolve_ensemble(cfg, ensemble)

    def one_side(sub_cfg: ExperimentConfig, mode: str) -> InequalityReport:
        ssp = sub_cfg.scenario.sp
        stats = path_statistics(sub_cfg, ens)
        X = stats.sup_norm ** q_n
        _require_finite(X, "higher-moment statistic", sub_cfg.base_seed)
        terms = []
        for k in range(1, n + 1):
            rule = norm_power_rule(ssp, sub_cfg.scenario.field, sp.p**k)
            base = ls_integral_nu(
                sub_cfg.scenario.ms, rule, sub_cfg.eval_time, horizon=sub_cfg.scenario.horizon
            )
            terms.append(base ** (sp.p ** (n - k)))
        rhs = float(np.sum(terms))
        if not np.isfinite(rhs):
            raise ValueError("intensity sum overflows the float range at this moment_level")
        extras = _base_extras(sub_cfg)
        extras["moment_level"] = n
        extras["rhs_terms"] = tuple(float(v) for v in terms)
        return _build_report(mode, ssp, q_n, X, None, (rhs, 0.0), sub_cfg.n_paths, extras)

    report = one_side(cfg, "higher_moment")
    sub = one_side(_scalar_flat_variant(cfg), "higher_moment_scalar")
    extras = dict(report.extras)
    extras["scalar_identity"] = {
        "lhs_mean": sub.lhs_mean,
        "lhs_stderr": sub.lhs_stderr,
        "rhs_mean": sub.rhs_mean,
        "ratio_hat": sub.ratio_hat,
        "ratio_ci": sub.ratio_ci,
    }
    return replace(report, extras=extras)


# ----------------------------------------------------------- flat integrals


def ito_isometry_report(
    cfg: ExperimentConfig, ensemble: Ensemble | None = None
) -> InequalityReport:
    """E |I_t(f)|^p against the exact intensity integral, identity semigroup.

    In the Hilbert configuration (r = 2, p = 2) the two sides are equal, so
    the report enforces agreement within four standard errors; elsewhere the
    ratio is recorded as data.
    """
    scn = cfg.scenario
    if scn.gen.kind != "identity_semigroup":
        raise ValueError("the isometry report is defined for the identity semigroup")
    sp = scn.sp
    stats = path_statistics(cfg, ensemble)
    X = np.asarray(norm(sp, stats.terminal), dtype=float) ** sp.p
    _require_finite(X, "terminal statistic", cfg.base_seed)
    rule = norm_power_rule(sp, scn.field, sp.p)
    rhs = float(ls_integral_nu(scn.ms, rule, cfg.eval_time, horizon=scn.horizon))
    extras = _base_extras(cfg)
    hilbert = sp.r == 2.0 and sp.p == 2.0
    extras["hilbert"] = bool(hilbert)
    report = _build_report("isometry", sp, sp.p, X, None, (rhs, 0.0), cfg.n_paths, extras)
    if hilbert and report.lhs_stderr > 0.0:
        gap = abs(report.lhs_mean - rhs)
        extras["hilbert_gap_se"] = float(gap / report.lhs_stderr)
        report = replace(report, extras=extras)
        if gap > 4.0 * report.lhs_stderr:
            raise AssertionError(
                f"Hilbert isometry violated: |lhs - rhs| = {gap:.6g} "
                f"exceeds 4 x stderr = {4.0 * report.lhs_stderr:.6g}"
            )
    return report


def dyadic_step_approximant(
    field: FieldIntegrand, ms: MarkSpace, t_eval: float, level: int
) -> FieldIntegrand:
    """Piecewise-constant approximant on 2^level cells of (0, t_eval].

    Each cell takes the field's right limit at its left edge, so a step field
    whose kinks sit on the mesh reproduces itself exactly.
    """
    cells = 2 ** int(level)
    edges = np.linspace(0.0, float(t_eval), cells + 1)
    left_in = np.nextafter(edges[:-1], edges[1:])
    vals = np.stack([field.mark_values(left_in, k) for k in range(ms.n_marks)], axis=1)
    return step_field(edges, vals, label=f"{field.label}/step{level}")


def step_approx_convergence(
    cfg: ExperimentConfig, refinements, ensemble: Ensemble | None = None
) -> StepApproxReport:
    """Distances between a field and its dyadic step approximants.

    For each level the report pairs the exact integrated p-th power distance
    with the Monte Carlo moment of the integral of the difference field; the
    martingale-type bound says the latter is dominated by a constant multiple
    of the former, and est_constant is the largest observed quotient.
    """
    scn = cfg.scenario
    sp = scn.sp
    levels = tuple(int(n) for n in refinements)
    if not levels:
        raise ValueError("refinements must be nonempty")
    ens = _resolve_ensemble(cfg, ensemble)
    t_eval = cfg.eval_time
    mp_d, mc_d, mc_se, ratios = [], [], [], []
    for n in levels:
        approx = dyadic_step_approximant(scn.field, scn.ms, t_eval, n)
        base = scn.field
        diff = FunctionField(
            lambda tt, k, a=approx, b=base: b.mark_values(tt, int(k)) - a.mark_values(tt, int(k)),
            dim=sp.d,
            n_marks=scn.ms.n_marks,
            breakpoints=tuple(sorted(set(base.breakpoints) | set(approx.breakpoints))),
            label=f"{base.label}-step{n}",
        )
        dist = float(
            ls_integral_nu(scn.ms, norm_power_rule(sp, diff, sp.p), t_eval, horizon=scn.horizon)
        )
        I_diff = field_integral_ensemble(ens, diff, t_eval)
        X = np.asarray(norm(sp, I_diff), dtype=float) ** sp.p
        _require_finite(X, "step-distance statistic", cfg.base_seed)
        m, se = _mean_se(X)
        mp_d.append(dist)
        mc_d.append(m)
        mc_se.append(se)
        ratios.append(m / dist if dist > 0.0 else 0.0)
    return StepApproxReport(
        levels=levels,
        mp_distance=tuple(mp_d),
        mc_distance=tuple(mc_d),
        mc_stderr=tuple(mc_se),
        ratio=tuple(ratios),
        est_constant=float(max(ratios)) if ratios else 0.0,
        p=float(sp.p),
        n_paths=int(cfg.n_paths),
    )
