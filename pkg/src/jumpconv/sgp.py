"""Contraction semigroups S(t) = e^{tA} on R^d and their resolvent calculus.

Four generator kinds cover the experiments: nonpositive diagonal rates, the
Dirichlet second-difference matrix (scaled), a general dissipative dense
matrix, and the identity semigroup (A = 0).  Diagonal, Dirichlet and identity
kinds act through a cached spectral factorization, so S(t)x costs O(d^2) for
arbitrary t; dense kinds go through scipy's scaling-and-squaring Pade
exponential with a per-generator cache keyed by the exact time step.

Resolvents R(lam, A) = (lam I - A)^{-1} are computed spectrally when possible
and by LU solve with one refinement step otherwise; a residual above
1e-12 relative is an error, never a silent degradation.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import expm, schur

from .space import SmoothSpace, _sphere_samples, norm, phi_grad

__all__ = [
    "Generator",
    "check_contraction",
    "check_dissipativity_phi",
]

KINDS = ("diagonal", "dirichlet_laplacian", "dense", "identity_semigroup")


class Generator:
    """One generator A together with its semigroup and resolvent actions."""

    def __init__(self, kind: str, matrix: np.ndarray, *, eigvals=None, eigvecs=None):
        if kind not in KINDS:
            raise ValueError(f"unknown generator kind {kind!r}")
        A = np.asarray(matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("generator matrix must be square")
        if not np.all(np.isfinite(A)):
            raise ValueError("generator matrix must be finite")
        self.kind = kind
        self.d = A.shape[0]
        self.A = A
        self.A.setflags(write=False)
        # spectral data: eigvals (d,) with eigvecs None meaning the standard basis
        self.eigvals = None if eigvals is None else np.asarray(eigvals, dtype=float)
        self.eigvecs = None if eigvecs is None else np.asarray(eigvecs, dtype=float)
        self._expm_cache: dict[float, np.ndarray] = {}
        self._normal_factors: tuple | None = None
        self._normal_checked = False

    # ------------------------------------------------------------------ build
    @classmethod
    def diagonal(cls, rates) -> "Generator":
        rates = np.asarray(rates, dtype=float)
        if rates.ndim != 1 or rates.size < 1:
            raise ValueError("rates must be a nonempty 1-d array")
        if not np.all(np.isfinite(rates)) or np.any(rates > 0.0):
            raise ValueError("diagonal rates must be finite and <= 0")
        return cls("diagonal", np.diag(rates), eigvals=rates)

    @classmethod
    def dirichlet_laplacian(cls, d: int, scale: float = 1.0) -> "Generator":
        if d < 1:
            raise ValueError("dimension must be at least 1")
        if not (np.isfinite(scale) and scale > 0.0):
            raise ValueError("scale must be positive")
        A = scale * (np.diag(-2.0 * np.ones(d)) + np.diag(np.ones(d - 1), 1) + np.diag(np.ones(d - 1), -1))
        w, V = np.linalg.eigh(A)
        return cls("dirichlet_laplacian", A, eigvals=w, eigvecs=V)

    @classmethod
    def dense(cls, matrix) -> "Generator":
        A = np.asarray(matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("generator matrix must be square")
        # contraction on l^2 iff the symmetric part is negative semidefinite
        sym = 0.5 * (A + A.T)
        top = float(np.linalg.eigvalsh(sym).max())
        tol = 1e-12 * max(1.0, float(np.abs(A).max()))
        if top > tol:
            raise ValueError(
                f"dense generator is not dissipative: symmetric part has eigenvalue {top:.3e} > 0"
            )
        return cls("dense", A)

    @classmethod
    def identity(cls, d: int) -> "Generator":
        if d < 1:
            raise ValueError("dimension must be at least 1")
        return cls("identity_semigroup", np.zeros((d, d)), eigvals=np.zeros(d))

    # ------------------------------------------------------------------ action
    @property
    def is_spectral(self) -> bool:
        return self.eigvals is not None

    def _check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.d,):
            raise ValueError(f"point must have {self.d} coordinates")
        return x

    def apply(self, t: float, x) -> np.ndarray:
        """S(t) x for t >= 0; accepts stacked points (..., d)."""
        if not (np.isfinite(t) and t >= 0.0):
            raise ValueError("semigroup time must be finite and >= 0")
        x = self._check_point(x)
        if self.kind == "identity_semigroup" or t == 0.0:
            return x.copy()
        if self.is_spectral:
            decay = np.exp(t * self.eigvals)
            if self.eigvecs is None:
                return x * decay
            return ((x @ self.eigvecs) * decay) @ self.eigvecs.T
        return x @ self.apply_matrix(t).T

    def apply_matrix(self, t: float) -> np.ndarray:
        """The matrix S(t), cached per exact t for dense generators."""
        if not (np.isfinite(t) and t >= 0.0):
            raise ValueError("semigroup time must be finite and >= 0")
        if self.is_spectral:
            decay = np.exp(t * self.eigvals)
            if self.eigvecs is None:
                return np.diag(decay)
            return (self.eigvecs * decay) @ self.eigvecs.T
        t = float(t)
        S = self._expm_cache.get(t)
        if S is None:
            S = expm(t * self.A)
            self._expm_cache[t] = S
        return S

    def A_apply(self, x) -> np.ndarray:
        """Generator action A x (all of R^d is the domain here)."""
        x = self._check_point(x)
        if self.kind == "identity_semigroup":
            return np.zeros_like(x)
        return x @ self.A.T

    def normal_spectral_factors(self):
        """(w, Z) with A = Z diag(w) Z^H and Z unitary, or None if A is not normal.

        Spectral kinds return their stored real factorization (Z may be None,
        meaning the standard basis).  Dense kinds get a complex Schur pass: a
        normal matrix leaves the triangular factor diagonal up to roundoff.
        """
        if self.is_spectral:
            return self.eigvals.astype(complex), self.eigvecs
        if not self._normal_checked:
            self._normal_checked = True
            T, Z = schur(self.A.astype(complex), output="complex")
            off = T - np.diag(np.diag(T))
            if np.abs(off).max() <= 1e-12 * max(1.0, float(np.abs(self.A).max())):
                self._normal_factors = (np.diag(T), Z)
        return self._normal_factors

    # --------------------------------------------------------------- resolvent
    def resolvent(self, lam: float, x) -> np.ndarray:
        """R(lam, A) x = (lam I - A)^{-1} x for lam > 0."""
        if not (np.isfinite(lam) and lam > 0.0):
            raise ValueError("resolvent parameter must satisfy lam > 0")
        x = self._check_point(x)
        if self.is_spectral:
            denom = lam - self.eigvals
            if self.eigvecs is None:
                return x / denom
            return ((x @ self.eigvecs) / denom) @ self.eigvecs.T
        M = lam * np.eye(self.d) - self.A
        y = np.linalg.solve(M, x[..., None]).squeeze(-1) if x.ndim > 1 else np.linalg.solve(M, x)
        # one step of iterative refinement, then verify the 1e-12 contract
        resid = x - y @ M.T
        y = y + (np.linalg.solve(M, resid[..., None]).squeeze(-1) if x.ndim > 1 else np.linalg.solve(M, resid))
        resid = x - y @ M.T
        scale = np.abs(x).max() + (lam + np.abs(self.A).max()) * max(np.abs(y).max(), 1e-300)
        if np.abs(resid).max() > 1e-12 * scale:
            raise ArithmeticError("resolvent solve failed the 1e-12 residual contract")
        return y

    def yosida_scale(self, n: float, xi) -> np.ndarray:
        """n R(n, A) xi, the bounded shrinking of xi toward the domain of A."""
        if self.kind == "identity_semigroup":
            # n R(n, 0) = I exactly; avoid the n * (x / n) round trip
            if not (np.isfinite(n) and n > 0.0):
                raise ValueError("resolvent parameter must satisfy n > 0")
            return self._check_point(xi).copy()
        return n * self.resolvent(n, xi)

    def yosida_operator(self, lam: float, x) -> np.ndarray:
        """A_lam x = lam (lam R(lam, A) - I) x, the bounded surrogate of A."""
        x = self._check_point(x)
        return lam * (self.yosida_scale(lam, x) - x)

    def yosida_matrix(self, n: float) -> np.ndarray:
        """Matrix of n R(n, A)."""
        if not (np.isfinite(n) and n > 0.0):
            raise ValueError("resolvent parameter must satisfy n > 0")
        if self.is_spectral:
            fac = n / (n - self.eigvals)
            if self.eigvecs is None:
                return np.diag(fac)
            return (self.eigvecs * fac) @ self.eigvecs.T
        return np.linalg.solve(n * np.eye(self.d) - self.A, n * np.eye(self.d))

    def __repr__(self):  # pragma: no cover
        return f"Generator(kind={self.kind!r}, d={self.d})"


DEFAULT_T_GRID = (0.01, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0)


def check_contraction(
    gen: Generator,
    sp: SmoothSpace,
    t_grid=DEFAULT_T_GRID,
    n_sphere: int = 64,
    seed: int = 0,
) -> float:
    """Max of |S(t)x| / |x| over sampled times and unit-sphere points.

    A value above 1 is a legitimate finding (the generator is not a
    contraction for this norm), not an exception.
    """
    if gen.d != sp.d:
        raise ValueError("generator and space dimensions differ")
    rng = np.random.Generator(np.random.Philox(key=seed))
    pts = _sphere_samples(sp, n_sphere, rng)
    worst = 0.0
    for t in t_grid:
        ratios = np.asarray(norm(sp, gen.apply(float(t), pts)))
        worst = max(worst, float(ratios.max()))
    return worst


def check_dissipativity_phi(
    gen: Generator, sp: SmoothSpace, n_samples: int = 256, seed: int = 0
) -> float:
    """Max of phi'(x)(A x) over unit-sphere samples (<= 0 up to roundoff
    whenever the semigroup contracts the l^r norm)."""
    if gen.d != sp.d:
        raise ValueError("generator and space dimensions differ")
    rng = np.random.Generator(np.random.Philox(key=seed))
    pts = _sphere_samples(sp, n_samples, rng)
    vals = np.asarray(phi_grad(sp, pts, gen.A_apply(pts)))
    return float(vals.max())
