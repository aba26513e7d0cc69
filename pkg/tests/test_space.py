"""Smooth functional phi = |x|_r^q: derivatives against finite differences,
closed-form constants, and martingale-type estimation."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpconv.space import (
    MartingaleEnsemble,
    SmoothSpace,
    compensated_poisson_ensemble,
    estimate_mtype_constant,
    estimate_smoothness_constants,
    gaussian_ensemble,
    norm,
    phi,
    phi_grad,
    phi_grad_vector,
    phi_hess,
    rademacher_ensemble,
)

# central-difference oracles; steps tuned so truncation ~ eps^2 dominates roundoff
FD_STEP = 1e-5
FD_RTOL = 5e-5

SPACES = [
    SmoothSpace(d=3, r=2.0, q=2.0, p=2.0),
    SmoothSpace(d=3, r=2.0, q=4.0, p=2.0),
    SmoothSpace(d=3, r=2.5, q=3.0, p=1.5),
    SmoothSpace(d=3, r=4.0, q=4.0, p=2.0),
    SmoothSpace(d=2, r=3.0, q=2.0, p=1.2),
]


def away_from_axes(rng, d):
    # third derivatives degenerate on coordinate hyperplanes for r < 4;
    # keep samples clear of them so difference quotients are clean
    x = rng.standard_normal(d)
    x += 0.2 * np.sign(x)
    return x


class TestNormPhi:
    def test_closed_values(self):
        sp = SmoothSpace(2, 2.0, 2.0, 2.0)
        assert norm(sp, [3.0, 4.0]) == pytest.approx(5.0, rel=1e-15)
        assert phi(sp, [3.0, 4.0]) == pytest.approx(25.0, rel=1e-15)
        sp4 = SmoothSpace(2, 4.0, 4.0, 2.0)
        assert norm(sp4, [3.0, 4.0]) == pytest.approx(337.0**0.25, rel=1e-14)
        assert phi(sp4, [3.0, 4.0]) == pytest.approx(337.0, rel=1e-13)

    def test_batched_matches_scalar(self):
        sp = SmoothSpace(3, 2.5, 3.0, 1.5)
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((7, 3))
        batched = norm(sp, pts)
        for i in range(7):
            assert batched[i] == pytest.approx(norm(sp, pts[i]), rel=1e-15)

    def test_zero_point(self):
        sp = SmoothSpace(3, 4.0, 4.0, 2.0)
        assert norm(sp, np.zeros(3)) == 0.0
        assert phi(sp, np.zeros(3)) == 0.0

    def test_dimension_mismatch(self):
        sp = SmoothSpace(3, 2.0, 2.0, 2.0)
        with pytest.raises(ValueError):
            norm(sp, [1.0, 2.0])

    def test_non_finite_rejected(self):
        sp = SmoothSpace(2, 2.0, 2.0, 2.0)
        with pytest.raises(ValueError):
            norm(sp, [np.nan, 0.0])

    def test_overflow_raises_with_guidance(self):
        sp = SmoothSpace(2, 2.0, 4.0, 2.0)
        with pytest.raises(ArithmeticError, match="rescale"):
            phi(sp, [1e200, 1e200])

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            SmoothSpace(2, 1.5, 2.0, 2.0)  # r < 2
        with pytest.raises(ValueError):
            SmoothSpace(2, 2.0, 1.5, 1.4)  # q < 2
        with pytest.raises(ValueError):
            SmoothSpace(2, 2.0, 2.0, 2.5)  # p > 2
        with pytest.raises(ValueError):
            SmoothSpace(2, 2.0, 2.0, 1.0)  # p = 1
        with pytest.raises(ValueError):
            SmoothSpace(0, 2.0, 2.0, 2.0)


class TestDerivatives:
    @pytest.mark.parametrize("sp", SPACES, ids=lambda s: f"r{s.r}q{s.q}")
    def test_grad_matches_central_difference(self, sp):
        rng = np.random.default_rng(42)
        for _ in range(25):
            x = away_from_axes(rng, sp.d)
            h = rng.standard_normal(sp.d)
            fd = (phi(sp, x + FD_STEP * h) - phi(sp, x - FD_STEP * h)) / (2 * FD_STEP)
            scale = max(1.0, abs(fd))
            assert abs(phi_grad(sp, x, h) - fd) <= FD_RTOL * scale

    @pytest.mark.parametrize("sp", SPACES, ids=lambda s: f"r{s.r}q{s.q}")
    def test_hess_matches_mixed_difference(self, sp):
        rng = np.random.default_rng(43)
        eps = 1e-4
        for _ in range(25):
            x = away_from_axes(rng, sp.d)
            h = rng.standard_normal(sp.d)
            k = rng.standard_normal(sp.d)
            fd = (
                phi(sp, x + eps * h + eps * k)
                - phi(sp, x + eps * h - eps * k)
                - phi(sp, x - eps * h + eps * k)
                + phi(sp, x - eps * h - eps * k)
            ) / (4 * eps * eps)
            scale = max(1.0, abs(fd))
            assert abs(phi_hess(sp, x, h, k) - fd) <= 2e-4 * scale

    @pytest.mark.parametrize("sp", SPACES, ids=lambda s: f"r{s.r}q{s.q}")
    def test_euler_identity(self, sp):
        # q-homogeneity forces phi'(x)(x) = q phi(x)
        rng = np.random.default_rng(44)
        for _ in range(20):
            x = rng.standard_normal(sp.d)
            assert phi_grad(sp, x, x) == pytest.approx(sp.q * phi(sp, x), rel=1e-12)

    @pytest.mark.parametrize("sp", SPACES, ids=lambda s: f"r{s.r}q{s.q}")
    def test_dual_norm_of_gradient_is_exactly_q_scaled(self, sp):
        # |phi'(x)|_{r'} = q |x|^{q-1} in closed form; the certified bound k1 is attained
        rng = np.random.default_rng(45)
        rd = sp.r_dual
        for _ in range(20):
            x = rng.standard_normal(sp.d)
            g = phi_grad_vector(sp, x)
            dual = (np.abs(g) ** rd).sum() ** (1.0 / rd)
            assert dual == pytest.approx(sp.q * norm(sp, x) ** (sp.q - 1.0), rel=1e-12)

    def test_hilbert_case_is_plain_inner_product(self):
        sp = SmoothSpace(3, 2.0, 2.0, 2.0)
        rng = np.random.default_rng(46)
        x, h, k = rng.standard_normal((3, 3))
        assert phi(sp, x) == pytest.approx(float(x @ x), rel=1e-14)
        assert phi_grad(sp, x, h) == pytest.approx(2.0 * float(x @ h), rel=1e-13)
        assert phi_hess(sp, x, h, k) == pytest.approx(2.0 * float(h @ k), rel=1e-13)

    def test_values_at_zero(self):
        z = np.zeros(2)
        h = np.array([1.0, -2.0])
        k = np.array([0.5, 1.0])
        assert phi_grad(SmoothSpace(2, 4.0, 4.0, 2.0), z, h) == 0.0
        assert phi_hess(SmoothSpace(2, 4.0, 4.0, 2.0), z, h, k) == 0.0
        assert phi_hess(SmoothSpace(2, 2.0, 2.0, 2.0), z, h, k) == pytest.approx(
            2.0 * float(h @ k)
        )
        assert phi_hess(SmoothSpace(2, 4.0, 2.0, 1.5), z, h, k) == 0.0

    def test_batched_grad_and_hess(self):
        sp = SmoothSpace(3, 4.0, 4.0, 2.0)
        rng = np.random.default_rng(47)
        xs = rng.standard_normal((6, 3))
        hs = rng.standard_normal((6, 3))
        ks = rng.standard_normal((6, 3))
        gb = phi_grad(sp, xs, hs)
        hb = phi_hess(sp, xs, hs, ks)
        for i in range(6):
            assert gb[i] == pytest.approx(phi_grad(sp, xs[i], hs[i]), rel=1e-13)
            assert hb[i] == pytest.approx(phi_hess(sp, xs[i], hs[i], ks[i]), rel=1e-13)


@settings(max_examples=80, deadline=None)
@given(
    c=st.floats(min_value=-8.0, max_value=8.0).filter(lambda v: abs(v) > 1e-3),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_phi_homogeneity(c, seed):
    sp = SmoothSpace(3, 3.0, 3.0, 2.0)
    x = np.random.default_rng(seed).standard_normal(3)
    assert phi(sp, c * x) == pytest.approx(abs(c) ** sp.q * phi(sp, x), rel=1e-11)


class TestSmoothnessConstants:
    def test_hilbert_q2(self):
        k1, k2 = estimate_smoothness_constants(SmoothSpace(3, 2.0, 2.0, 2.0), 128, seed=1)
        assert k1 == pytest.approx(2.0, rel=1e-12)
        assert k2 == pytest.approx(2.0, rel=1e-9)

    def test_r2_q4_closed_form(self):
        # |phi'(x)| = 4|x|^3 and the Hessian 8 x x^T + 4|x|^2 I has top value 12
        k1, k2 = estimate_smoothness_constants(SmoothSpace(3, 2.0, 4.0, 2.0), 256, seed=2)
        assert k1 == pytest.approx(4.0, rel=1e-12)
        assert k2 == pytest.approx(12.0, rel=1e-9)

    def test_l4_constants_finite_and_stable(self):
        sp = SmoothSpace(3, 4.0, 4.0, 2.0)
        k1a, k2a = estimate_smoothness_constants(sp, 256, seed=3)
        k1b, k2b = estimate_smoothness_constants(sp, 512, seed=4)
        assert k1a == pytest.approx(4.0, rel=1e-12)
        # doubling the sample budget moves the estimates by < 5%
        assert abs(k1b - k1a) <= 0.05 * k1a
        assert 0.0 < k2a < 100.0 and abs(k2b - k2a) <= 0.05 * max(k2a, k2b)

    def test_bounds_hold_on_samples(self):
        sp = SmoothSpace(3, 4.0, 4.0, 2.0)
        k1, k2 = estimate_smoothness_constants(sp, 256, seed=5)
        rng = np.random.default_rng(6)
        rd = sp.r_dual
        for _ in range(50):
            x = rng.standard_normal(3) * rng.uniform(0.1, 3.0)
            h = rng.standard_normal(3)
            k = rng.standard_normal(3)
            g = phi_grad_vector(sp, x)
            dual = (np.abs(g) ** rd).sum() ** (1.0 / rd)
            assert dual <= (1.0 + 1e-9) * k1 * norm(sp, x) ** (sp.q - 1.0)
            bound = (1.0 + 1e-9) * k2 * norm(sp, x) ** (sp.q - 2.0)
            assert abs(phi_hess(sp, x, h, k)) <= bound * norm(sp, h) * norm(sp, k)


class TestMartingaleType:
    def test_single_step_sign_ensemble_is_exactly_one(self):
        sp = SmoothSpace(1, 2.0, 2.0, 2.0)
        ens = rademacher_ensemble(1, 1, 64, seed=0)
        assert estimate_mtype_constant(sp, 2.0, ens) == 1.0

    def test_random_walk_ratio_near_one(self):
        # E|M_n|^2 = sum E|dM_k|^2 exactly for orthogonal increments; the
        # empirical max-over-n ratio deviates by O(1/sqrt(M)).  With M = 20000
        # and Var(M_n^2)/n^2 ~ 2, six sigma of the max statistic is ~ 0.06.
        sp = SmoothSpace(1, 2.0, 2.0, 2.0)
        ens = rademacher_ensemble(1, 64, 20_000, seed=7)
        ratio = estimate_mtype_constant(sp, 2.0, ens)
        assert abs(ratio - 1.0) <= 0.06

    def test_p15_d2_ratios_bounded_by_reported_max(self):
        sp = SmoothSpace(2, 2.0, 2.0, 1.5)
        ratios = []
        for s in range(20):
            ens = gaussian_ensemble(2, 16, 512, seed=100 + s, scale=1.0 + 0.1 * s)
            ratios.append(estimate_mtype_constant(sp, 1.5, ens))
        ratios = np.array(ratios)
        assert np.all(np.isfinite(ratios)) and np.all(ratios > 0.0)
        assert np.all(ratios <= ratios.max())

    def test_poisson_ensemble_accepted(self):
        ens = compensated_poisson_ensemble(2, 8, 4_000, eta=2.0, seed=11)
        sp = SmoothSpace(2, 2.0, 2.0, 2.0)
        assert np.isfinite(estimate_mtype_constant(sp, 2.0, ens))

    def test_biased_increments_rejected(self):
        rng = np.random.default_rng(12)
        inc = rng.standard_normal((500, 4, 2)) + 1.0  # blatant drift
        with pytest.raises(ValueError, match="standard errors"):
            MartingaleEnsemble(inc)

    def test_exponent_validation(self):
        sp = SmoothSpace(1, 2.0, 2.0, 2.0)
        ens = rademacher_ensemble(1, 2, 10, seed=0)
        with pytest.raises(ValueError):
            estimate_mtype_constant(sp, 2.5, ens)
        with pytest.raises(ValueError):
            estimate_mtype_constant(sp, 1.0, ens)
