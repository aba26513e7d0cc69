"""Stochastic integrals against compensated Poisson event streams.

Two integrand layers: StepIntegrand mirrors the elementary objects (piecewise
constant in time, one coefficient per time-interval x mark-cell, optionally
adapted through a callback that sees only the strict past), and field
integrands assign a vector xi(t, z_k) to every time and mark.  Integrals of
fields split exactly into an event sum minus a deterministic compensator
integral; the compensator is integrated in closed form for piecewise
polynomial fields and by kink-aware composite Simpson otherwise.

The Simpson layout (segment splitting, node placement, summation order) is
deliberately centralized here: the convolution engine reuses it with
semigroup weights, which is what makes the identity-semigroup collapse
bit-near instead of merely close.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prm import MarkSpace, PoissonPath
from .space import SmoothSpace, norm

__all__ = [
    "QuadConfig",
    "StepIntegrand",
    "FieldIntegrand",
    "PolynomialField",
    "FunctionField",
    "ScalarRule",
    "CadlagPath",
    "constant_field",
    "linear_field",
    "poly_mean_pieces",
    "polynomial_field",
    "step_field",
    "function_field",
    "norm_power_rule",
    "integrate_step",
    "integrate_field",
    "integral_path",
    "ls_integral_N",
    "ls_integral_nu",
]


@dataclass(frozen=True)
class QuadConfig:
    """Composite-Simpson budget: the step never exceeds range/panels."""

    panels: int = 4096

    def __post_init__(self):
        if self.panels < 2:
            raise ValueError("need at least two quadrature panels")

    def h_max(self, length: float) -> float:
        return max(length, 1e-300) / self.panels


DEFAULT_QUAD = QuadConfig()


def _simpson_segment(fn, lo: float, hi: float, h_max: float):
    """Composite Simpson on one kink-free segment, step <= h_max.

    The segment is treated as (lo, hi]: the left node is nudged one ulp
    inward so left-continuous step rules are sampled on the correct side
    of a kink.  For smooth rules the nudge is far below quadrature error.
    """
    if hi <= lo:
        zero = fn(np.array([lo]))
        return np.zeros(zero.shape[1:]) if zero.ndim > 1 else 0.0
    n = max(2, 2 * int(np.ceil((hi - lo) / (2.0 * h_max))))
    x = np.linspace(lo, hi, n + 1)
    x[0] = np.nextafter(lo, hi)
    w = np.full(n + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    w *= (hi - lo) / (3.0 * n)
    vals = np.asarray(fn(x))
    return w @ vals


def _split_points(a: float, b: float, kinks) -> np.ndarray:
    ks = np.asarray([k for k in kinks if a < k < b], dtype=float)
    return np.unique(np.concatenate([[a], ks, [b]]))


def integrate_kinked(fn, a: float, b: float, h_max: float, kinks=()):
    """Integral of a vectorized rule over [a, b], splitting at interior kinks."""
    if b < a:
        raise ValueError("integration range must have a <= b")
    if b == a:
        probe = np.asarray(fn(np.array([a])))
        return np.zeros(probe.shape[1:]) if probe.ndim > 1 else 0.0
    pts = _split_points(a, b, kinks)
    total = None
    for lo, hi in zip(pts[:-1], pts[1:]):
        part = _simpson_segment(fn, float(lo), float(hi), h_max)
        total = part if total is None else total + part
    return total


# --------------------------------------------------------------------- fields


class FieldIntegrand:
    """Deterministic field xi(t, z_k) in R^d, vectorized in t.

    Subclasses provide `mark_values`; everything else (pooled evaluation,
    compensator rates, exact integrals when available) derives from it.
    """

    dim: int
    n_marks: int
    breakpoints: tuple = ()
    label: str = ""

    def mark_values(self, times: np.ndarray, k: int) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def values(self, times, marks) -> np.ndarray:
        """xi(t_i, z_{m_i}) for pooled event arrays."""
        times = np.asarray(times, dtype=float)
        marks = np.asarray(marks, dtype=np.int64)
        out = np.zeros((times.size, self.dim))
        for k in np.unique(marks):
            sel = marks == k
            out[sel] = self.mark_values(times[sel], int(k))
        return out

    def mean_rate(self, ms: MarkSpace, times) -> np.ndarray:
        """m(t) = sum_k nu_k xi(t, z_k), the compensator density."""
        times = np.asarray(times, dtype=float)
        out = np.zeros((times.size, self.dim))
        for k in range(self.n_marks):
            out += ms.weights[k] * self.mark_values(times, k)
        return out

    def rate_integral(self, ms: MarkSpace, a: float, b: float) -> np.ndarray | None:
        """Exact integral of mean_rate over [a, b] when available, else None."""
        return None

    def transform(self, matrix=None, scale: float = 1.0) -> "FieldIntegrand":
        """Pointwise linear image t -> scale * (M xi(t, z))."""
        return _TransformedField(self, matrix, scale)

    def _require_marks(self, ms: MarkSpace):
        if ms.n_marks != self.n_marks:
            raise ValueError("field and mark space disagree on the number of marks")


class PolynomialField(FieldIntegrand):
    """Piecewise polynomial in t per mark; compensators integrate exactly.

    pieces: ((lo, hi, C), ...) contiguous from 0, C of shape (n_marks, deg+1, d)
    with C[k, j] the coefficient of t^j.  Values follow the predictable
    convention: on a kink the piece ending there wins.
    """

    def __init__(self, pieces, label: str = ""):
        pieces = tuple((float(lo), float(hi), np.asarray(C, dtype=float)) for lo, hi, C in pieces)
        if not pieces:
            raise ValueError("need at least one piece")
        if pieces[0][0] != 0.0:
            raise ValueError("pieces must start at 0")
        for (lo, hi, C), (lo2, _, C2) in zip(pieces, pieces[1:] + ((pieces[-1][1], None, pieces[-1][2]),)):
            if hi <= lo:
                raise ValueError("piece bounds must increase")
            if lo2 != hi:
                raise ValueError("pieces must tile the time axis without gaps")
            if C.ndim != 3 or C.shape[0] != pieces[0][2].shape[0] or C.shape[2] != pieces[0][2].shape[2]:
                raise ValueError("inconsistent coefficient shapes across pieces")
            if not np.all(np.isfinite(C)):
                raise ValueError("coefficients must be finite")
        self.pieces = pieces
        self.n_marks = pieces[0][2].shape[0]
        self.dim = pieces[0][2].shape[2]
        self.breakpoints = tuple(lo for lo, _, _ in pieces[1:])
        self.label = label
        self._lows = np.array([lo for lo, _, _ in pieces])

    def _piece_index(self, times: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self._lows, times, side="left") - 1
        return np.clip(idx, 0, len(self.pieces) - 1)

    @staticmethod
    def _horner(C_k: np.ndarray, times: np.ndarray) -> np.ndarray:
        out = np.zeros((times.size, C_k.shape[1]))
        for j in range(C_k.shape[0] - 1, -1, -1):
            out = out * times[:, None] + C_k[j]
        return out

    def mark_values(self, times: np.ndarray, k: int) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        out = np.zeros((times.size, self.dim))
        idx = self._piece_index(times)
        for pi in np.unique(idx):
            sel = idx == pi
            out[sel] = self._horner(self.pieces[pi][2][k], times[sel])
        return out

    def rate_integral(self, ms: MarkSpace, a: float, b: float) -> np.ndarray:
        self._require_marks(ms)
        total = np.zeros(self.dim)
        for lo, hi, C in self.pieces:
            u, v = max(lo, a), min(hi, b)
            if v <= u:
                continue
            mean_C = np.tensordot(ms.weights, C, axes=1)  # (deg+1, d)
            for j in range(mean_C.shape[0]):
                total += mean_C[j] * (v ** (j + 1) - u ** (j + 1)) / (j + 1)
        return total


class FunctionField(FieldIntegrand):
    """Field from a vectorized callable fn(times, k) -> (n, d)."""

    def __init__(self, fn, dim: int, n_marks: int, antiderivative=None, breakpoints=(), label=""):
        self.fn = fn
        self.dim = int(dim)
        self.n_marks = int(n_marks)
        self.antiderivative = antiderivative
        self.breakpoints = tuple(float(b) for b in breakpoints)
        self.label = label

    def mark_values(self, times: np.ndarray, k: int) -> np.ndarray:
        out = np.asarray(self.fn(np.asarray(times, dtype=float), k), dtype=float)
        if out.shape != (times.size, self.dim):
            raise ValueError("field callable returned a misshaped block")
        return out

    def rate_integral(self, ms: MarkSpace, a: float, b: float):
        if self.antiderivative is None:
            return None
        self._require_marks(ms)
        total = np.zeros(self.dim)
        for k in range(self.n_marks):
            ends = np.asarray(self.antiderivative(np.array([a, b]), k), dtype=float)
            total += ms.weights[k] * (ends[1] - ends[0])
        return total


class _TransformedField(FieldIntegrand):
    def __init__(self, base: FieldIntegrand, matrix, scale: float):
        self.base = base
        self.matrix = None if matrix is None else np.asarray(matrix, dtype=float)
        self.scale = float(scale)
        if self.matrix is not None and self.matrix.shape != (base.dim, base.dim):
            raise ValueError("transform matrix must be d x d")
        self.dim = base.dim
        self.n_marks = base.n_marks
        self.breakpoints = base.breakpoints
        self.label = base.label

    def _map(self, block: np.ndarray) -> np.ndarray:
        out = self.scale * block
        if self.matrix is not None:
            out = out @ self.matrix.T
        return out

    def mark_values(self, times: np.ndarray, k: int) -> np.ndarray:
        return self._map(self.base.mark_values(times, k))

    def rate_integral(self, ms: MarkSpace, a: float, b: float):
        inner = self.base.rate_integral(ms, a, b)
        return None if inner is None else self._map(inner)


def poly_mean_pieces(f: FieldIntegrand, ms: MarkSpace):
    """Mean-rate polynomial pieces [(lo, hi, sum_k nu_k C_k)], or None.

    Transform wrappers commute with the nu-average, so the pieces push
    through them; any other field reports None and falls back to quadrature.
    """
    if isinstance(f, PolynomialField):
        f._require_marks(ms)
        return [(lo, hi, np.tensordot(ms.weights, C, axes=1)) for lo, hi, C in f.pieces]
    if isinstance(f, _TransformedField):
        inner = poly_mean_pieces(f.base, ms)
        if inner is None:
            return None
        return [(lo, hi, f._map(C)) for lo, hi, C in inner]
    return None


def constant_field(values, label: str = "constant") -> PolynomialField:
    """xi(t, z_k) = v_k; values has shape (n_marks, d)."""
    V = np.asarray(values, dtype=float)
    if V.ndim != 2:
        raise ValueError("values must have shape (n_marks, d)")
    return PolynomialField([(0.0, np.inf, V[:, None, :])], label=label)


def linear_field(slopes, offsets=None, label: str = "linear") -> PolynomialField:
    """xi(t, z_k) = u_k + t v_k."""
    V = np.asarray(slopes, dtype=float)
    if V.ndim != 2:
        raise ValueError("slopes must have shape (n_marks, d)")
    U = np.zeros_like(V) if offsets is None else np.asarray(offsets, dtype=float)
    C = np.stack([U, V], axis=1)
    return PolynomialField([(0.0, np.inf, C)], label=label)


def polynomial_field(coeffs, label: str = "polynomial") -> PolynomialField:
    """Single-piece polynomial; coeffs has shape (n_marks, deg+1, d)."""
    C = np.asarray(coeffs, dtype=float)
    if C.ndim != 3:
        raise ValueError("coeffs must have shape (n_marks, deg+1, d)")
    return PolynomialField([(0.0, np.inf, C)], label=label)


def step_field(breakpoints, values, label: str = "step") -> PolynomialField:
    """Piecewise-constant field: values has shape (n_intervals, n_marks, d)."""
    bp = np.asarray(breakpoints, dtype=float)
    V = np.asarray(values, dtype=float)
    if bp.ndim != 1 or bp.size < 2 or bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
        raise ValueError("breakpoints must increase strictly from 0")
    if V.ndim != 3 or V.shape[0] != bp.size - 1:
        raise ValueError("values must have shape (n_intervals, n_marks, d)")
    pieces = [(bp[j], bp[j + 1], V[j][:, None, :]) for j in range(bp.size - 1)]
    # constant zero beyond the last breakpoint
    pieces.append((bp[-1], np.inf, np.zeros_like(V[0][:, None, :])))
    return PolynomialField(pieces, label=label)


def function_field(fn, dim, n_marks, antiderivative=None, breakpoints=(), label="function"):
    return FunctionField(fn, dim, n_marks, antiderivative, breakpoints, label)


@dataclass(frozen=True)
class ScalarRule:
    """Nonnegative scalar rule g(t, z), vectorized like a field."""

    fn: object
    breakpoints: tuple = ()

    def __call__(self, times, marks) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(times, dtype=float), np.asarray(marks)), dtype=float)


def norm_power_rule(sp: SmoothSpace, f: FieldIntegrand, power: float) -> ScalarRule:
    """g(t, z) = |xi(t, z)|_r^power."""
    if power <= 0.0:
        raise ValueError("power must be positive")

    def fn(times, marks):
        return np.asarray(norm(sp, f.values(times, marks))) ** power

    return ScalarRule(fn, breakpoints=tuple(f.breakpoints))


# ------------------------------------------------------------ step integrands


@dataclass(frozen=True)
class StepIntegrand:
    """Elementary integrand: one coefficient per (time interval, mark cell).

    cells[j] lists (mark_indices, coeff) pairs for the window
    (breakpoints[j], breakpoints[j+1]]; mark cells within one interval must
    be disjoint.  A coefficient is either a (d,) array or a callable
    (times, marks) -> (d,) receiving the events strictly before the
    interval's left endpoint (the testable shadow of predictability).
    """

    breakpoints: np.ndarray
    cells: tuple
    dim: int

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.ndim != 1 or bp.size < 2 or bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must increase strictly from 0")
        if len(self.cells) != bp.size - 1:
            raise ValueError("need one cell list per interval")
        cells = []
        for interval in self.cells:
            seen: set[int] = set()
            norm_cells = []
            for marks, coeff in interval:
                idx = tuple(int(m) for m in marks)
                if len(set(idx)) != len(idx) or seen & set(idx):
                    raise ValueError("mark cells within an interval must be disjoint")
                seen |= set(idx)
                if not callable(coeff):
                    coeff = np.asarray(coeff, dtype=float)
                    if coeff.shape != (self.dim,) or not np.all(np.isfinite(coeff)):
                        raise ValueError("coefficients must be finite (d,) arrays")
                norm_cells.append((idx, coeff))
            cells.append(tuple(norm_cells))
        bp = bp.copy()
        bp.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "cells", tuple(cells))

    @property
    def horizon(self) -> float:
        return float(self.breakpoints[-1])

    def is_static(self) -> bool:
        return all(not callable(c) for interval in self.cells for _, c in interval)

    def to_field(self, n_marks: int) -> PolynomialField:
        """Per-mark step field (static coefficients only)."""
        if not self.is_static():
            raise ValueError("adapted step integrands have no deterministic field form")
        bp = self.breakpoints
        vals = np.zeros((bp.size - 1, n_marks, self.dim))
        for j, interval in enumerate(self.cells):
            for idx, coeff in interval:
                for k in idx:
                    if k >= n_marks:
                        raise ValueError("mark index out of range for the requested alphabet")
                    vals[j, k] += coeff
        return step_field(bp, vals, label="step-integrand")


from .prm import compensated  # noqa: E402  (cycle-free; placed after types)


def integrate_step(path: PoissonPath, f: StepIntegrand, t: float) -> np.ndarray:
    """I_t(f) = sum_j sum_cells coeff * compensated((t_{j-1}^t, t_j^t] x cell)."""
    if not 0.0 <= t <= path.horizon:
        raise ValueError("evaluation time must lie in [0, horizon]")
    total = np.zeros(f.dim)
    bp = f.breakpoints
    for j in range(bp.size - 1):
        lo = min(float(bp[j]), t)
        hi = min(float(bp[j + 1]), t)
        if hi <= lo:
            break
        for idx, coeff in f.cells[j]:
            if callable(coeff):
                cut = int(np.searchsorted(path.times, bp[j], side="left"))
                coeff = np.asarray(
                    coeff(path.times[:cut], path.marks[:cut]), dtype=float
                )
                if coeff.shape != (f.dim,):
                    raise ValueError("adapted coefficient returned a misshaped point")
            total += coeff * compensated(path, lo, hi, idx)
    return total


# ------------------------------------------------------------ field integrals


def _comp_integral(ms: MarkSpace, f: FieldIntegrand, a: float, b: float, h_max: float):
    exact = f.rate_integral(ms, a, b)
    if exact is not None:
        return exact
    return integrate_kinked(lambda s: f.mean_rate(ms, s), a, b, h_max, kinks=f.breakpoints)


def integrate_field(path: PoissonPath, f: FieldIntegrand, t: float, quad: QuadConfig = DEFAULT_QUAD) -> np.ndarray:
    """I_t(xi): event sum minus the compensator integral over [0, t]."""
    if not 0.0 <= t <= path.horizon:
        raise ValueError("evaluation time must lie in [0, horizon]")
    f._require_marks(path.ms)
    n = path.n_up_to(t)
    jumps = f.values(path.times[:n], path.marks[:n]).sum(axis=0)
    comp = _comp_integral(path.ms, f, 0.0, float(t), quad.h_max(path.horizon))
    return jumps - comp


def _merged_times(path: PoissonPath, grid, extra=()):
    if isinstance(grid, (int, np.integer)):
        base = np.linspace(0.0, path.horizon, int(grid) + 1)
    else:
        base = np.asarray(grid, dtype=float)
        if base.ndim != 1 or base.size < 2:
            raise ValueError("grid must be an int or a 1-d array of times")
        if base.min() < 0.0 or base.max() > path.horizon:
            raise ValueError("grid times must lie in [0, horizon]")
    parts = [base, np.asarray([0.0, path.horizon]), path.times]
    if len(extra):
        ex = np.asarray(extra, dtype=float)
        parts.append(ex[(ex >= 0.0) & (ex <= path.horizon)])
    return np.unique(np.concatenate(parts))


def integral_path(path: PoissonPath, f: FieldIntegrand, grid=4096, quad: QuadConfig = DEFAULT_QUAD) -> "CadlagPath":
    """The cadlag running integral t -> I_t(xi) on grid + event times."""
    f._require_marks(path.ms)
    times = _merged_times(path, grid, extra=f.breakpoints)
    jump_sizes = f.values(path.times, path.marks)
    # cumulative event sum evaluated with events <= tau (right limits)
    cum_jumps = np.zeros((times.size, f.dim))
    if path.n_events:
        csum = np.cumsum(jump_sizes, axis=0)
        pos = np.searchsorted(path.times, times, side="right")
        nonzero = pos > 0
        cum_jumps[nonzero] = csum[pos[nonzero] - 1]
    # compensator accumulated per segment (exact where the field allows)
    h_max = quad.h_max(path.horizon)
    comp = np.zeros((times.size, f.dim))
    for i in range(1, times.size):
        comp[i] = comp[i - 1] + _comp_integral(path.ms, f, float(times[i - 1]), float(times[i]), h_max)
    values = cum_jumps - comp
    ev_pos = np.searchsorted(times, path.times)
    jump_right = values[ev_pos]
    jump_left = jump_right - jump_sizes
    return CadlagPath(
        times=times,
        values=values,
        jump_times=path.times.copy(),
        jump_left=jump_left,
        jump_right=jump_right,
        jump_sizes=jump_sizes,
        horizon=path.horizon,
    )


def ls_integral_N(path: PoissonPath, g, t: float) -> float:
    """int_0^t int_Z g dN = sum of g at events, g >= 0 enforced."""
    if not 0.0 <= t <= path.horizon:
        raise ValueError("evaluation time must lie in [0, horizon]")
    n = path.n_up_to(t)
    if n == 0:
        return 0.0
    vals = np.asarray(g(path.times[:n], path.marks[:n]), dtype=float)
    if np.any(vals < 0.0):
        raise ValueError("Lebesgue-Stieltjes rule must be nonnegative")
    return float(vals.sum())


def ls_integral_nu(
    ms: MarkSpace, g, t: float, quad: QuadConfig = DEFAULT_QUAD, horizon: float | None = None
) -> float:
    """int_0^t sum_k g(s, z_k) nu_k ds by kink-aware Simpson."""
    if not (np.isfinite(t) and t >= 0.0):
        raise ValueError("evaluation time must be finite and >= 0")
    if t == 0.0:
        return 0.0
    kinks = getattr(g, "breakpoints", ())

    def rate(s):
        out = np.zeros(s.size)
        for k in range(ms.n_marks):
            out += ms.weights[k] * np.asarray(g(s, np.full(s.size, k, dtype=np.int64)))
        return out

    h_max = QuadConfig(quad.panels).h_max(horizon if horizon is not None else t)
    return float(integrate_kinked(rate, 0.0, float(t), h_max, kinks=kinks))


# ------------------------------------------------------------------- paths


@dataclass(frozen=True)
class CadlagPath:
    """Right-continuous path on recorded times with a jump registry.

    values[i] is the right limit at times[i]; the registry keeps both limits
    and the exact jump sizes (the integrand values, recorded verbatim).
    """

    times: np.ndarray
    values: np.ndarray
    jump_times: np.ndarray
    jump_left: np.ndarray
    jump_right: np.ndarray
    jump_sizes: np.ndarray
    horizon: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 1 or t[0] != 0.0:
            raise ValueError("recorded times must start at 0")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("recorded times must be strictly increasing")
        if self.values.shape[0] != t.size:
            raise ValueError("one value per recorded time required")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        """Right-continuous lookup at a recorded or earlier time."""
        if not 0.0 <= t <= self.horizon:
            raise ValueError("time out of range")
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.values[idx]

    def sup_norm(self, sp: SmoothSpace, up_to: float | None = None) -> float:
        """sup of |value| over recorded times and both event limits."""
        cut = self.horizon if up_to is None else float(up_to)
        sel = self.times <= cut
        cand = np.asarray(norm(sp, self.values[sel]))
        best = float(cand.max()) if cand.size else 0.0
        jsel = self.jump_times <= cut
        if np.any(jsel):
            best = max(best, float(np.asarray(norm(sp, self.jump_left[jsel])).max()))
        return best
