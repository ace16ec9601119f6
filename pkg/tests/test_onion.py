import numpy as np
import pytest
from scipy.interpolate import BSpline

from sct._jax import jnp
from sct.errors import ValidationError
from sct.onion import (
    KnotGrid,
    OnionSpline,
    bspline_basis,
    build_knots,
    build_table,
    coefficients_from_gamma,
    gamma_from_beta,
    h_derivative,
    h_forward,
    h_inverse,
    spline_slope,
    spline_value,
)


def random_spline(rng, D=40, a=-4.0, b=4.0, scale=1.5):
    grid = build_knots(a, b, D)
    beta = rng.normal(scale=scale, size=D)
    return grid, beta, np.asarray(gamma_from_beta(beta, grid))


class TestKnotGrid:
    def test_production_default_layout(self):
        g = build_knots(-4.0, 4.0, 40)
        assert g.m == 45 and g.J == 47
        assert g.k == pytest.approx(8.0 / 42.0, rel=1e-15)
        assert g.knots[2 + 2] == -4.0 and g.knots[g.m - 1 + 2] == 4.0

    def test_minimal_layout(self):
        g = build_knots(0.0, 1.0, 1)
        assert g.m == 6 and g.k == pytest.approx(1.0 / 3.0)
        assert g.knots[4] == 0.0 and g.knots[7] == 1.0  # k_2 = 0, k_5 = 1

    def test_three_param_layout(self):
        g = build_knots(-1.0, 1.0, 3)
        assert g.m == 8 and g.k == pytest.approx(2.0 / 5.0)

    def test_equidistant(self):
        g = build_knots(-4.0, 4.0, 40)
        steps = np.diff(g.knots)
        assert np.all(np.abs(steps / g.k - 1) < 1e-12)
        assert len(g.knots) == g.m + 6

    def test_invalid_inputs(self):
        with pytest.raises(ValidationError):
            build_knots(1.0, 1.0, 3)
        with pytest.raises(ValidationError):
            build_knots(0.0, 1.0, 0)


class TestGamma:
    def test_constant_beta_gives_log_k(self):
        g = build_knots(-1.0, 1.0, 3)
        gamma = np.asarray(gamma_from_beta(np.zeros(3), g))
        assert np.allclose(gamma[4:7], np.log(g.k), rtol=0, atol=0)

    def test_constant_shift_is_bit_exact(self):
        g = build_knots(-1.0, 1.0, 3)
        g0 = np.asarray(gamma_from_beta(np.zeros(3), g))
        g1 = np.asarray(gamma_from_beta(np.full(3, 17.3), g))
        assert (g0 == g1).all()

    def test_two_param_hand_arithmetic(self):
        # m = 7, k = 1 forces b - a = 4
        g = build_knots(0.0, 4.0, 2)
        assert g.m == 7 and g.k == pytest.approx(1.0)
        gamma = np.asarray(gamma_from_beta(np.array([np.log(2.0), 0.0]), g))
        assert gamma[4] == pytest.approx(np.log(2.0) - np.log(1.5), rel=1e-14)
        assert gamma[5] == pytest.approx(-np.log(1.5), rel=1e-14)
        assert np.exp(gamma[4:7 - 1]).sum() == pytest.approx(2.0, rel=1e-12)

    def test_free_increments_normalized(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            grid, beta, gamma = random_spline(rng, D=int(rng.integers(1, 50)))
            free = gamma[4 : grid.J - 3]
            assert len(free) == grid.D
            target = (grid.m - 5) * grid.k
            assert np.exp(free).sum() == pytest.approx(target, rel=1e-10)

    def test_shift_invariance_random(self):
        rng = np.random.default_rng(1)
        grid = build_knots(-4.0, 4.0, 12)
        beta = rng.normal(size=12)
        g0 = np.asarray(gamma_from_beta(beta, grid))
        g1 = np.asarray(gamma_from_beta(beta + 123.456, grid))
        np.testing.assert_allclose(g1, g0, rtol=0, atol=1e-12)

    def test_stable_for_large_beta(self):
        grid = build_knots(-4.0, 4.0, 5)
        for c in (700.0, -700.0):
            beta = np.array([c, c / 2, 0.0, -c / 2, c])
            gamma = np.asarray(gamma_from_beta(beta, grid))
            assert np.all(np.isfinite(gamma))

    def test_fixed_entries(self):
        rng = np.random.default_rng(2)
        grid, beta, gamma = random_spline(rng, D=7)
        logk = np.log(grid.k)
        assert gamma[0] == grid.knots[2]  # k_0
        assert np.all(gamma[1:4] == logk)
        assert np.all(gamma[-3:] == logk)

    def test_non_finite_rejected(self):
        grid = build_knots(-1.0, 1.0, 3)
        with pytest.raises(ValidationError):
            gamma_from_beta(np.array([0.0, np.nan, 1.0]), grid)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(3)
        grid = build_knots(-4.0, 4.0, 6)
        betas = rng.normal(size=(5, 6))
        batched = np.asarray(gamma_from_beta(betas, grid))
        for i in range(5):
            np.testing.assert_array_equal(
                batched[i], np.asarray(gamma_from_beta(betas[i], grid))
            )


class TestBasis:
    def test_matches_scipy_bspline(self):
        # oracle: scipy's basis elements over the identical knot vector
        rng = np.random.default_rng(4)
        grid, beta, gamma = random_spline(rng, D=9)
        x = rng.uniform(grid.k1, grid.km, size=200)
        mine = bspline_basis(x, grid.knots, degree=3)
        for j in range(grid.J):
            c = np.zeros(grid.J)
            c[j] = 1.0
            ref = BSpline(grid.knots, c, 3)(x)
            np.testing.assert_allclose(mine[:, j], ref, atol=1e-13)

    def test_partition_of_unity(self):
        rng = np.random.default_rng(5)
        grid = build_knots(-4.0, 4.0, 40)
        x = rng.uniform(grid.k1, grid.km, size=2000)
        x = np.append(x, [grid.k1, grid.km, grid.a, grid.b])
        s = bspline_basis(x, grid.knots, degree=3).sum(axis=1)
        np.testing.assert_allclose(s, 1.0, rtol=0, atol=1e-12)

    def test_quadratic_matches_scipy(self):
        rng = np.random.default_rng(6)
        grid = build_knots(-2.0, 2.0, 6)
        x = rng.uniform(grid.k1, grid.km, size=100)
        mine = bspline_basis(x, grid.knots, degree=2)
        n = len(grid.knots) - 3
        for j in range(n):
            c = np.zeros(n)
            c[j] = 1.0
            ref = BSpline(grid.knots, c, 2)(x)
            np.testing.assert_allclose(mine[:, j], ref, atol=1e-13)


class TestForward:
    def test_constant_beta_is_identity(self):
        grid = build_knots(-4.0, 4.0, 40)
        gamma = gamma_from_beta(np.full(40, 2.2), grid)
        x = np.linspace(-8, 8, 401)
        np.testing.assert_allclose(h_forward(x, gamma, grid), x, atol=1e-13)

    def test_curve_matches_scipy_bspline(self):
        # oracle: full scipy curve with my cumulative coefficients
        rng = np.random.default_rng(7)
        for _ in range(5):
            grid, beta, gamma = random_spline(rng, D=int(rng.integers(2, 45)))
            c = np.asarray(coefficients_from_gamma(gamma))
            ref = BSpline(grid.knots, c, 3)
            x = rng.uniform(grid.a, grid.b, size=300)
            np.testing.assert_allclose(
                h_forward(x, gamma, grid), ref(x), rtol=1e-12, atol=1e-12
            )

    def test_passes_through_k1_a_b_km(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            grid, beta, gamma = random_spline(rng)
            for pt in (grid.k1, grid.a, grid.b, grid.km):
                # raw spline branch carries the lemma content
                assert spline_value(pt, gamma, grid) == pytest.approx(pt, abs=1e-12)
                assert h_forward(np.array(pt), gamma, grid) == pytest.approx(pt, abs=1e-12)

    def test_identity_outside_is_exact(self):
        rng = np.random.default_rng(9)
        grid, beta, gamma = random_spline(rng)
        x = np.concatenate(
            (np.linspace(-9, grid.a, 50), np.linspace(grid.b, 9, 50))
        )
        y = np.asarray(h_forward(x, gamma, grid))
        assert (y == x).all()

    def test_monotone_bulk(self):
        # 10^5 random (beta, x1 < x2) pairs across 100 splines
        rng = np.random.default_rng(10)
        for _ in range(100):
            grid, beta, gamma = random_spline(rng, D=20, scale=2.5)
            x = np.sort(rng.uniform(grid.k1 - 1, grid.km + 1, size=(1000, 2)), axis=1)
            y = np.asarray(h_forward(x, gamma, grid))
            assert (y[:, 0] < y[:, 1]).all()

    def test_jnp_matches_numpy(self):
        rng = np.random.default_rng(11)
        grid, beta, gamma = random_spline(rng)
        x = rng.uniform(-6, 6, size=64)
        a = np.asarray(h_forward(x, gamma, grid))
        b = np.asarray(h_forward(jnp.asarray(x), jnp.asarray(gamma), grid, xp=jnp))
        np.testing.assert_allclose(b, a, rtol=0, atol=1e-14)
        da = np.asarray(h_derivative(x, gamma, grid))
        db = np.asarray(h_derivative(jnp.asarray(x), jnp.asarray(gamma), grid, xp=jnp))
        np.testing.assert_allclose(db, da, rtol=0, atol=1e-14)


class TestDerivative:
    def test_matches_finite_difference(self):
        rng = np.random.default_rng(12)
        grid, beta, gamma = random_spline(rng)
        x = rng.uniform(grid.a, grid.b, size=500)
        h = 1e-5
        fd = (
            np.asarray(h_forward(x + h, gamma, grid))
            - np.asarray(h_forward(x - h, gamma, grid))
        ) / (2 * h)
        d = np.asarray(h_derivative(x, gamma, grid))
        np.testing.assert_allclose(d, fd, rtol=1e-6)

    def test_matches_scipy_derivative(self):
        rng = np.random.default_rng(13)
        grid, beta, gamma = random_spline(rng, D=11)
        c = np.asarray(coefficients_from_gamma(gamma))
        ref = BSpline(grid.knots, c, 3).derivative()
        x = rng.uniform(grid.k1, grid.km, size=300)
        np.testing.assert_allclose(
            spline_slope(x, gamma, grid), ref(x), rtol=1e-10, atol=1e-12
        )

    def test_unit_slope_outside_flexible_region(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            grid, beta, gamma = random_spline(rng)
            xl = np.linspace(grid.k1, grid.a, 25)
            xr = np.linspace(grid.b, grid.km, 25)
            # raw spline slope: the lemma itself, to fp tolerance
            np.testing.assert_allclose(spline_slope(xl, gamma, grid), 1.0, atol=1e-12)
            np.testing.assert_allclose(spline_slope(xr, gamma, grid), 1.0, atol=1e-12)
            # public evaluator: exactly 1 beyond a and b
            assert (np.asarray(h_derivative(np.linspace(-9, grid.a, 9), gamma, grid)) == 1).all()

    def test_strictly_positive(self):
        rng = np.random.default_rng(15)
        grid, beta, gamma = random_spline(rng, scale=3.0)
        x = np.linspace(grid.k1, grid.km, 4001)
        assert (np.asarray(h_derivative(x, gamma, grid)) > 0).all()

    def test_average_slope_is_one(self):
        # Gauss-Legendre per knot segment: exact for the quadratic slope
        rng = np.random.default_rng(16)
        nodes, weights = np.polynomial.legendre.leggauss(6)
        for _ in range(20):
            grid, beta, gamma = random_spline(rng, D=int(rng.integers(1, 45)))
            total = 0.0
            for q in range(2, grid.m - 1):
                lo, hi = grid.knots[q + 2], grid.knots[q + 3]
                mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
                total += half * np.sum(
                    weights * np.asarray(spline_slope(mid + half * nodes, gamma, grid))
                )
            assert total / (grid.b - grid.a) == pytest.approx(1.0, abs=1e-9)


def one_sided_derivatives(f, x0, h, side):
    """First and second derivative estimates from 4 points on one side.

    Stencils are exact for cubic polynomials, so only roundoff remains
    when all nodes sit on one polynomial piece.
    """
    s = 1.0 if side == "right" else -1.0
    f0, f1, f2, f3 = (f(x0 + s * i * h) for i in range(4))
    d1 = s * (-11 * f0 + 18 * f1 - 9 * f2 + 2 * f3) / (6 * h)
    d2 = (2 * f0 - 5 * f1 + 4 * f2 - f3) / h**2
    return d1, d2


class TestSpliceSmoothness:
    def test_c2_at_boundaries(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            grid, beta, gamma = random_spline(rng)
            f = lambda x: float(h_forward(np.array(x), gamma, grid))
            h = grid.k / 8
            for pt in (grid.k1, grid.a, grid.b, grid.km):
                l1, l2 = one_sided_derivatives(f, pt, h, "left")
                r1, r2 = one_sided_derivatives(f, pt, h, "right")
                assert abs(l1 - r1) < 1e-5
                assert abs(l2 - r2) < 1e-5


class TestInverse:
    def test_identity_case(self):
        grid = build_knots(-4.0, 4.0, 40)
        gamma = gamma_from_beta(np.zeros(40), grid)
        assert h_inverse(0.37, gamma, grid) == pytest.approx(0.37, abs=1e-10)

    def test_outside_is_exact(self):
        rng = np.random.default_rng(18)
        grid, beta, gamma = random_spline(rng)
        assert h_inverse(grid.b + 5.0, gamma, grid) == grid.b + 5.0
        assert h_inverse(grid.a - 2.5, gamma, grid) == grid.a - 2.5

    def test_round_trip_random(self):
        rng = np.random.default_rng(19)
        for _ in range(10):
            grid, beta, gamma = random_spline(rng, scale=2.0)
            x0 = rng.uniform(grid.a, grid.b, size=200)
            y = np.asarray(h_forward(x0, gamma, grid))
            x = h_inverse(y, gamma, grid)
            np.testing.assert_allclose(x, x0, atol=1e-8)
            resid = np.abs(np.asarray(h_forward(x, gamma, grid)) - y)
            assert resid.max() <= 1e-8

    def test_table_interp_close_to_exact(self):
        rng = np.random.default_rng(20)
        grid, beta, gamma = random_spline(rng)
        table = build_table(gamma, grid, G=1000)
        x = rng.uniform(grid.k1, grid.km, size=100)
        exact = np.asarray(h_forward(x, gamma, grid))
        approx = table.forward_interp(x)
        np.testing.assert_allclose(approx, exact, atol=5e-4)


class TestOnionSplineClass:
    def test_bundles_everything(self):
        rng = np.random.default_rng(21)
        grid = build_knots(-4.0, 4.0, 10)
        spl = OnionSpline(grid, rng.normal(size=10))
        x = rng.uniform(-5, 5, size=50)
        y = spl.forward(x)
        np.testing.assert_allclose(spl.inverse(y), x, atol=1e-8)
        assert (np.asarray(spl.derivative(x)) > 0).all()
