"""Marked Poisson event streams with finitely many mark atoms.

The driving noise is a stationary Poisson point process on (0, T] x Z where
Z = {z_1, ..., z_m} is a finite mark alphabet carrying an atomic intensity
nu = sum_k nu_k delta_{z_k}.  Counts over disjoint time windows and mark
subsets are independent Poisson variables with mean (b - a) * nu(B), and the
compensated count subtracts that mean pathwise.

Randomness comes from numpy's Philox generator (counter-based), keyed by an
explicit 64-bit seed.  Ensembles derive per-path substreams by XOR-ing the
base seed with the path index, so path j is reproducible in isolation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MarkSpace",
    "PoissonPath",
    "make_rng",
    "substream",
    "sample_count",
    "sample_path",
    "count",
    "compensated",
]

_U64 = 2**64


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator keyed by an unsigned 64-bit seed."""
    seed = int(seed)
    if not 0 <= seed < _U64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.Philox(key=seed))


def substream(base_seed: int, index: int) -> int:
    """Substream key for one path of an ensemble: base_seed XOR index."""
    if index < 0:
        raise ValueError("path index must be nonnegative")
    return (int(base_seed) ^ int(index)) % _U64


def _as_rng(rng) -> tuple[np.random.Generator, int | None]:
    # integers are seeds (remembered for reproducibility), generators pass through
    if isinstance(rng, (int, np.integer)):
        return make_rng(rng), int(rng)
    if isinstance(rng, np.random.Generator):
        return rng, None
    raise TypeError("rng must be an int seed or a numpy Generator")


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark alphabet with strictly positive atom weights nu_k."""

    marks: tuple[str, ...]
    weights: np.ndarray

    def __post_init__(self):
        marks = tuple(str(m) for m in self.marks)
        w = np.asarray(self.weights, dtype=float)
        if len(marks) < 1:
            raise ValueError("mark alphabet must be nonempty")
        if len(set(marks)) != len(marks):
            raise ValueError("mark names must be distinct")
        if w.ndim != 1 or w.shape[0] != len(marks):
            raise ValueError("weights must be a 1-d array matching the marks")
        if not np.all(np.isfinite(w)) or np.any(w <= 0.0):
            raise ValueError("atom weights must be finite and strictly positive")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", w)

    @property
    def n_marks(self) -> int:
        return len(self.marks)

    @property
    def total_rate(self) -> float:
        """Total mass nu(Z) = sum_k nu_k."""
        return float(self.weights.sum())

    def mark_indices(self, B=None) -> np.ndarray:
        """Normalize a mark subset to a sorted array of distinct indices."""
        if B is None:
            return np.arange(self.n_marks)
        idx = np.unique(np.asarray(list(B), dtype=int))
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_marks):
            raise ValueError("mark subset contains out-of-range indices")
        return idx

    def nu(self, B=None) -> float:
        """Intensity mass nu(B) of a mark subset (indices; None means all of Z)."""
        return float(self.weights[self.mark_indices(B)].sum())


@dataclass(frozen=True)
class PoissonPath:
    """One realized event stream: strictly increasing times in (0, T] with marks."""

    ms: MarkSpace
    horizon: float
    times: np.ndarray
    marks: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0.0):
            raise ValueError("horizon must be positive and finite")
        t = np.asarray(self.times, dtype=float)
        z = np.asarray(self.marks, dtype=np.int64)
        if t.ndim != 1 or z.shape != t.shape:
            raise ValueError("times and marks must be matching 1-d arrays")
        if t.size:
            if t[0] <= 0.0 or t[-1] > self.horizon:
                raise ValueError("event times must lie in (0, horizon]")
            if np.any(np.diff(t) <= 0.0):
                raise ValueError("event times must be strictly increasing")
            if z.min() < 0 or z.max() >= self.ms.n_marks:
                raise ValueError("mark indices out of range")
        t = t.copy()
        z = z.copy()
        t.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "marks", z)

    @property
    def n_events(self) -> int:
        return int(self.times.size)

    def n_up_to(self, t: float) -> int:
        """Number of events with t_i <= t."""
        return int(np.searchsorted(self.times, t, side="right"))

    def prefix(self, t: float) -> "PoissonPath":
        """Events strictly before t, as a path on (0, t]."""
        if not 0.0 < t <= self.horizon:
            raise ValueError("prefix cut must lie in (0, horizon]")
        k = int(np.searchsorted(self.times, t, side="left"))
        return PoissonPath(self.ms, t, self.times[:k], self.marks[:k], seed=None)


def sample_count(eta: float, rng) -> int:
    """One Poisson draw with mean eta >= 0."""
    if not (np.isfinite(eta) and eta >= 0.0):
        raise ValueError("Poisson mean must be finite and nonnegative")
    gen, _ = _as_rng(rng)
    return int(gen.poisson(eta))


def sample_path(ms: MarkSpace, T: float, rng) -> PoissonPath:
    """Sample one event stream on (0, T].

    Event times are the running sums of exponential gaps at the total rate
    Lambda = nu(Z); each event's mark is drawn categorically with weights
    nu_k / Lambda.  Ties (possible only through floating-point collisions)
    are nudged up by one ulp and reported as a warning.
    """
    if not (np.isfinite(T) and T > 0.0):
        raise ValueError("horizon must be positive and finite")
    gen, seed = _as_rng(rng)
    lam = ms.total_rate
    mean_gap = 1.0 / lam
    # draw gaps in chunks until the running time passes T; chunk policy is a
    # deterministic function of (ms, T) so the stream consumption is reproducible
    chunk = max(16, int(lam * T + 10.0 * np.sqrt(lam * T) + 10.0))
    gaps = gen.exponential(mean_gap, size=chunk)
    times = np.cumsum(gaps)
    while times[-1] <= T:
        gaps = gen.exponential(mean_gap, size=chunk)
        times = np.concatenate([times, times[-1] + np.cumsum(gaps)])
    times = times[times <= T]
    n = times.size
    if n and times[0] <= 0.0:
        # measure-zero corner: exponential gap underflowed to exactly 0
        times[0] = np.nextafter(0.0, np.inf)
        warnings.warn("event time collided with 0; nudged by one ulp", RuntimeWarning)
    if n and np.any(np.diff(times) <= 0.0):
        warnings.warn("event time collision; nudging later times by one ulp", RuntimeWarning)
        for i in range(1, n):
            if times[i] <= times[i - 1]:
                times[i] = np.nextafter(times[i - 1], np.inf)
        keep = times <= T
        times = times[keep]
        n = times.size
    if ms.n_marks == 1:
        marks = np.zeros(n, dtype=np.int64)
    else:
        marks = gen.choice(ms.n_marks, size=n, p=ms.weights / lam)
    return PoissonPath(ms, float(T), times, marks, seed=seed)


def _window(path: PoissonPath, a: float, b: float) -> tuple[int, int]:
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ValueError("window endpoints must be finite")
    if a > b:
        raise ValueError("window must satisfy a <= b")
    if a < 0.0 or b > path.horizon:
        raise ValueError("window must lie within [0, horizon]")
    lo = int(np.searchsorted(path.times, a, side="right"))
    hi = int(np.searchsorted(path.times, b, side="right"))
    return lo, hi


def count(path: PoissonPath, a: float, b: float, B=None) -> int:
    """N((a, b] x B): events with a < t_i <= b and mark in B.

    Window comparisons are bit-exact; an empty window (a == b) counts zero.
    """
    lo, hi = _window(path, a, b)
    if hi == lo:
        return 0
    idx = path.ms.mark_indices(B)
    if idx.size == path.ms.n_marks:
        return hi - lo
    return int(np.isin(path.marks[lo:hi], idx).sum())


def compensated(path: PoissonPath, a: float, b: float, B=None) -> float:
    """Compensated count N((a, b] x B) - (b - a) * nu(B)."""
    lo, hi = _window(path, a, b)
    idx = path.ms.mark_indices(B)
    if idx.size == path.ms.n_marks:
        n = hi - lo
    else:
        n = int(np.isin(path.marks[lo:hi], idx).sum()) if hi > lo else 0
    return float(n) - (b - a) * path.ms.nu(B)
