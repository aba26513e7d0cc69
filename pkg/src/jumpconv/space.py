"""Finite-dimensional l^r surrogate spaces and the smooth functional |x|^q.

A SmoothSpace fixes (d, r, q, p) with r >= 2, q >= 2 >= p > 1 and q >= p.
phi(x) = (sum |x_i|^r)^{q/r} is twice continuously differentiable; its
derivatives satisfy |phi'(x)|_* <= q |x|^{q-1} (the dual norm is attained
in closed form) and |phi''(x)| <= k2 |x|^{q-2}.  Evaluation factors out
max|x_i| so extreme inputs fail loudly instead of overflowing silently.

Points are plain float arrays of shape (d,); every operation also accepts
stacked arrays (..., d) and maps over the leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SmoothSpace",
    "MartingaleEnsemble",
    "norm",
    "phi",
    "phi_grad",
    "phi_grad_vector",
    "phi_hess",
    "estimate_smoothness_constants",
    "estimate_mtype_constant",
    "rademacher_ensemble",
    "gaussian_ensemble",
    "compensated_poisson_ensemble",
]


@dataclass(frozen=True)
class SmoothSpace:
    """Surrogate space: R^d with the l^r norm and smoothness power q."""

    d: int
    r: float
    q: float
    p: float

    def __post_init__(self):
        if int(self.d) < 1:
            raise ValueError("dimension must be at least 1")
        object.__setattr__(self, "d", int(self.d))
        for name in ("r", "q", "p"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.r >= 2.0:
            raise ValueError("norm exponent must satisfy r >= 2")
        if not self.q >= 2.0:
            raise ValueError("smoothness power must satisfy q >= 2")
        if not 1.0 < self.p <= 2.0:
            raise ValueError("moment exponent must satisfy 1 < p <= 2")
        if not self.q >= self.p:
            raise ValueError("smoothness power must satisfy q >= p")

    @property
    def r_dual(self) -> float:
        return self.r / (self.r - 1.0)


def _coords(sp: SmoothSpace, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (sp.d,):
        raise ValueError(f"point must have {sp.d} coordinates, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("point has non-finite coordinates")
    return x


def norm(sp: SmoothSpace, x) -> float | np.ndarray:
    """l^r norm, evaluated with the max factored out for overflow safety."""
    x = _coords(sp, x)
    m = np.max(np.abs(x), axis=-1)
    if x.ndim == 1:
        if m == 0.0:
            return 0.0
        if sp.r == 2.0:
            y = x / m
            return float(m * np.sqrt((y * y).sum()))
        return float(m * ((np.abs(x) / m) ** sp.r).sum() ** (1.0 / sp.r))
    safe = np.where(m > 0.0, m, 1.0)[..., None]
    y = np.abs(x) / safe
    if sp.r == 2.0:
        out = np.sqrt((y * y).sum(axis=-1))
    else:
        out = (y**sp.r).sum(axis=-1) ** (1.0 / sp.r)
    return np.where(m > 0.0, m * out, 0.0)


def phi(sp: SmoothSpace, x) -> float | np.ndarray:
    """phi(x) = |x|_r^q."""
    n = norm(sp, x)
    with np.errstate(over="ignore"):
        out = np.asarray(n) ** sp.q
    if not np.all(np.isfinite(out)):
        raise ArithmeticError(
            "phi overflowed; rescale the input (phi is q-homogeneous, so "
            "evaluate at x/c and multiply by c**q)"
        )
    return float(out) if np.ndim(out) == 0 else out


def phi_grad_vector(sp: SmoothSpace, x) -> np.ndarray:
    """Gradient covector of phi: q |x|^{q-r} |x_i|^{r-1} sgn(x_i).

    Evaluated on normalized coordinates so small |x| with q < r stays stable.
    phi'(0) = 0 for every admissible (r, q).
    """
    x = _coords(sp, x)
    n = np.asarray(norm(sp, x), dtype=float)
    safe = np.where(n > 0.0, n, 1.0)
    y = x / safe[..., None]
    with np.errstate(over="ignore"):
        g = sp.q * safe[..., None] ** (sp.q - 1.0) * np.abs(y) ** (sp.r - 1.0) * np.sign(y)
    out = np.where(n[..., None] > 0.0, g, 0.0)
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("phi gradient overflowed; rescale the input")
    return out


def phi_grad(sp: SmoothSpace, x, h) -> float | np.ndarray:
    """Directional derivative phi'(x)(h)."""
    h = _coords(sp, h)
    g = phi_grad_vector(sp, x)
    out = (g * h).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def phi_hess(sp: SmoothSpace, x, h, k) -> float | np.ndarray:
    """Second derivative as a bilinear form phi''(x)(h, k).

    With y = x/|x| and the covector u_i = |y_i|^{r-1} sgn(y_i),

        phi''(x)(h,k) = |x|^{q-2} [ q(q-r)(u.h)(u.k) + q(r-1) sum |y_i|^{r-2} h_i k_i ].

    At x = 0 this is 0 for q > 2; for q = 2 = r the form is 2<h,k> (the
    Hilbert case), and for q = 2 < r the continuous extension is 0.
    """
    x = _coords(sp, x)
    h = _coords(sp, h)
    k = _coords(sp, k)
    n = np.asarray(norm(sp, x), dtype=float)
    safe = np.where(n > 0.0, n, 1.0)
    y = x / safe[..., None]
    u = np.abs(y) ** (sp.r - 1.0) * np.sign(y)
    uh = (u * h).sum(axis=-1)
    uk = (u * k).sum(axis=-1)
    diag = (np.abs(y) ** (sp.r - 2.0) * h * k).sum(axis=-1)
    with np.errstate(over="ignore"):
        val = safe ** (sp.q - 2.0) * (
            sp.q * (sp.q - sp.r) * uh * uk + sp.q * (sp.r - 1.0) * diag
        )
    if sp.q == 2.0 and sp.r == 2.0:
        at_zero = 2.0 * (h * k).sum(axis=-1)
    else:
        at_zero = np.zeros(np.broadcast_shapes(n.shape, uh.shape))
    out = np.where(n > 0.0, val, at_zero)
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("phi hessian overflowed; rescale the input")
    return float(out) if np.ndim(out) == 0 else out


def _hess_matrix(sp: SmoothSpace, x) -> np.ndarray:
    """Dense d x d matrix of phi''(x), for norm estimation."""
    x = _coords(sp, x)
    n = float(norm(sp, x))
    if n == 0.0:
        if sp.q == 2.0 and sp.r == 2.0:
            return 2.0 * np.eye(sp.d)
        return np.zeros((sp.d, sp.d))
    y = x / n
    u = np.abs(y) ** (sp.r - 1.0) * np.sign(y)
    return n ** (sp.q - 2.0) * (
        sp.q * (sp.q - sp.r) * np.outer(u, u)
        + sp.q * (sp.r - 1.0) * np.diag(np.abs(y) ** (sp.r - 2.0))
    )


def _dual_argmax(sp: SmoothSpace, c: np.ndarray) -> np.ndarray:
    # maximizer of <h, c> over the unit l^r ball: h_i ~ sgn(c_i)|c_i|^{r'-1}
    a = np.abs(c)
    m = a.max()
    if m == 0.0:
        e = np.zeros_like(c)
        e[0] = 1.0
        return e
    w = (a / m) ** (sp.r_dual - 1.0) * np.sign(c)
    return w / norm(sp, w)


def _sphere_samples(sp: SmoothSpace, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    pts = rng.standard_normal((n_samples, sp.d))
    pts = pts / norm(sp, pts)[:, None]
    axes = np.concatenate([np.eye(sp.d), -np.eye(sp.d)])
    ones = np.ones(sp.d) / norm(sp, np.ones(sp.d))
    return np.concatenate([pts, axes, ones[None, :]])


def estimate_smoothness_constants(
    sp: SmoothSpace, n_samples: int = 512, seed: int = 0
) -> tuple[float, float]:
    """Empirical (k1, k2) for |phi'(x)|_* <= k1 |x|^{q-1}, |phi''(x)| <= k2 |x|^{q-2}.

    Sampling is on the unit sphere (both bounds are homogeneous).  The first
    ratio is q identically; the second is estimated per sample by alternating
    dual-norm ascent h -> argmax <h, H k> over the l^r ball, which for r = 2
    reduces to the power method.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.Generator(np.random.Philox(key=seed))
    pts = _sphere_samples(sp, n_samples, rng)
    rd = sp.r_dual
    g = phi_grad_vector(sp, pts)
    dual = (np.abs(g) ** rd).sum(axis=-1) ** (1.0 / rd)
    k1 = float(dual.max())

    k2 = 0.0
    for x in pts:
        H = _hess_matrix(sp, x)
        # PSD for admissible (r, q), so the bilinear max is the quadratic max
        evals, evecs = np.linalg.eigh(H)
        starts = [evecs[:, -1], x / float(norm(sp, x)), rng.standard_normal(sp.d)]
        best = 0.0
        for h0 in starts:
            h = h0 / float(norm(sp, h0))
            for _ in range(40):
                h_new = _dual_argmax(sp, H @ h)
                val = float(h_new @ H @ h_new)
                if val <= best * (1.0 + 1e-14):
                    best = max(best, val)
                    break
                best = val
                h = h_new
        k2 = max(k2, best)
    return k1, float(k2)


@dataclass(frozen=True)
class MartingaleEnsemble:
    """Stacked martingale-difference increments, shape (n_paths, n_steps, d).

    Construction validates the martingale-difference shadow: each step's
    sample mean must sit within four standard errors of zero, componentwise.
    """

    increments: np.ndarray
    description: str = ""

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 3:
            raise ValueError("increments must have shape (n_paths, n_steps, d)")
        if not np.all(np.isfinite(inc)):
            raise ValueError("increments must be finite")
        m_paths = inc.shape[0]
        if m_paths < 2:
            raise ValueError("need at least two paths")
        mean = inc.mean(axis=0)
        se = inc.std(axis=0, ddof=1) / np.sqrt(m_paths)
        if np.any(np.abs(mean) > 4.0 * se + 1e-15):
            raise ValueError("per-step mean exceeds four standard errors of zero")
        inc = inc.copy()
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]


def estimate_mtype_constant(sp: SmoothSpace, p: float, ensemble: MartingaleEnsemble) -> float:
    """Empirical lower bound for the constant in sup_n E|M_n|^p <= K sum E|dM_k|^p.

    Returns max over n of mean|M_n|^p / sum_{k<=n} mean|dM_k|^p, i.e. the
    sharpest ratio over the stopped prefixes.
    """
    if not 1.0 < p <= 2.0:
        raise ValueError("type exponent must satisfy 1 < p <= 2")
    inc = ensemble.increments
    if inc.shape[2] != sp.d:
        raise ValueError("ensemble dimension does not match the space")
    paths = np.cumsum(inc, axis=1)
    num = (np.asarray(norm(sp, paths)) ** p).mean(axis=0)  # (n_steps,)
    den = np.cumsum((np.asarray(norm(sp, inc)) ** p).mean(axis=0))
    ok = den > 0.0
    if not np.any(ok):
        return 0.0
    return float(np.max(num[ok] / den[ok]))


def rademacher_ensemble(d: int, n_steps: int, n_paths: int, seed: int = 0) -> MartingaleEnsemble:
    """Independent +-1 increments per coordinate, antithetically paired."""
    if n_paths % 2:
        raise ValueError("antithetic pairing needs an even number of paths")
    rng = np.random.Generator(np.random.Philox(key=seed))
    half = rng.integers(0, 2, size=(n_paths // 2, n_steps, d)) * 2.0 - 1.0
    inc = np.concatenate([half, -half])
    return MartingaleEnsemble(inc, description=f"rademacher d={d} n={n_steps}")


def gaussian_ensemble(
    d: int, n_steps: int, n_paths: int, seed: int = 0, scale: float = 1.0
) -> MartingaleEnsemble:
    """Standard normal increments scaled by `scale`, antithetically paired."""
    if n_paths % 2:
        raise ValueError("antithetic pairing needs an even number of paths")
    rng = np.random.Generator(np.random.Philox(key=seed))
    half = scale * rng.standard_normal((n_paths // 2, n_steps, d))
    inc = np.concatenate([half, -half])
    return MartingaleEnsemble(inc, description=f"gaussian d={d} n={n_steps}")


def compensated_poisson_ensemble(
    d: int, n_steps: int, n_paths: int, eta: float, seed: int = 0
) -> MartingaleEnsemble:
    """Centered Poisson increments N - eta per coordinate (skewed, heavier tail)."""
    if not eta > 0.0:
        raise ValueError("Poisson mean must be positive")
    rng = np.random.Generator(np.random.Philox(key=seed))
    inc = rng.poisson(eta, size=(n_paths, n_steps, d)) - eta
    return MartingaleEnsemble(inc, description=f"poisson({eta}) d={d} n={n_steps}")
