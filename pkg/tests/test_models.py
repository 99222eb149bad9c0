import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import smooth_paths
from mlpath.measure import DiscretePath, TimeGrid, WeightedSequence
from mlpath.models import (
    AlgebraicSolveError,
    AlgebraicSystem,
    PathDependentModel,
    algebraic_fw,
    algebraic_solve,
    harmonic_weights,
    path_dependent_cm_half_norm,
    path_dependent_map,
    path_dependent_om,
    path_dependent_om_constant,
    preset_drift,
    preset_map,
)

BASEL_HALF = math.pi**2 / 12


class TestPresets:
    def test_zero(self):
        d = preset_drift("zero")
        assert d(3.0) == 0.0 and d.derivative(3.0) == 0.0

    def test_ou(self):
        d = preset_drift("ou", theta=2.0)
        assert d(1.5) == -3.0
        np.testing.assert_array_equal(d.derivative(np.array([-7.0, 0.0, 11.0])), -2.0)

    def test_double_well(self):
        d = preset_drift("double_well")
        assert d(1.0) == 0.0 and d(-1.0) == 0.0 and d.derivative(0.0) == 1.0
        assert d.second_derivative(1.0) == -6.0

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown drift"):
            preset_drift("quartic")

    def test_maps(self):
        assert preset_map("linear", kappa=0.5)(np.array([2.0]), np.array([1]))[0] == 1.0
        with pytest.raises(ValueError):
            preset_map("linear", kappa=1.5)
        with pytest.raises(ValueError):
            preset_map("tanh", scale=2.0)
        with pytest.raises(ValueError):
            preset_map("cubic")


class TestPathDependent:
    def test_a_zero_reduces_to_wiener(self, unit_grid):
        m = PathDependentModel.constant(0.0, unit_grid)
        z = DiscretePath.from_function(unit_grid, lambda t: t)
        assert path_dependent_cm_half_norm(m, z) == pytest.approx(0.5, abs=1e-6)

    def test_a_one_closed_form(self, unit_grid):
        m = PathDependentModel.constant(1.0, unit_grid)
        z = DiscretePath.from_function(unit_grid, lambda t: t)
        assert path_dependent_cm_half_norm(m, z) == pytest.approx((1 - math.exp(-2)) / 4, abs=1e-5)

    def test_zero_path(self, unit_grid):
        m = PathDependentModel.constant(1.0, unit_grid)
        assert path_dependent_cm_half_norm(m, DiscretePath(unit_grid, np.zeros(1001))) == 0.0

    def test_pin_violation(self, unit_grid):
        m = PathDependentModel.constant(1.0, unit_grid)
        z = DiscretePath.from_function(unit_grid, lambda t: 1 + t)
        assert path_dependent_cm_half_norm(m, z) == math.inf
        assert path_dependent_om(m, z, 0.5).value == math.inf

    def test_derivative_check(self, unit_grid):
        with pytest.raises(ValueError):
            PathDependentModel(a=lambda t: np.ones_like(t), A=lambda t: 2 * t, grid=unit_grid)

    def test_time_dependent_coefficient(self):
        # a(t) = 2t, A(t) = t^2 and z(t) = t: compare with scipy quadrature
        from scipy.integrate import quad

        grid = TimeGrid(1.0, 800)
        m = PathDependentModel(a=lambda t: 2 * t, A=lambda t: t**2, grid=grid)
        z = DiscretePath.from_function(grid, lambda t: t)

        def integrand(t):
            inner = quad(lambda s: math.exp(-(t * t - s * s)), 0.0, t, epsabs=1e-13)[0]
            return (1.0 - 2 * t * inner) ** 2

        exact = 0.5 * quad(integrand, 0.0, 1.0, epsabs=1e-12)[0]
        assert path_dependent_cm_half_norm(m, z) == pytest.approx(exact, abs=1e-5)

    @given(st.floats(-3.0, 3.0))
    def test_homogeneous(self, alpha):
        grid = TimeGrid(1.0, 60)
        m = PathDependentModel(a=lambda t: 1 + t, A=lambda t: t + t**2 / 2, grid=grid)
        z = smooth_paths(grid, 1, 0)[0]
        assert path_dependent_cm_half_norm(m, alpha * z) == pytest.approx(
            alpha**2 * path_dependent_cm_half_norm(m, z), rel=1e-12, abs=1e-300
        )

    def test_gaussian_identity(self):
        # eps^2 OM_eps through the Girsanov map equals the double quadrature,
        # for every eps, up to O(dt^2)
        errs = []
        for n in (100, 200):
            grid = TimeGrid(1.0, n)
            m = PathDependentModel(a=lambda t: 1 + t, A=lambda t: t + t**2 / 2, grid=grid)
            z = DiscretePath.from_function(grid, lambda t: np.sin(2 * t) + t**2)
            ref = path_dependent_cm_half_norm(m, z)
            vals = [eps**2 * path_dependent_om(m, z, eps).value for eps in (1.0, 0.3, 0.01)]
            assert max(vals) - min(vals) <= 1e-12 * ref
            errs.append(abs(vals[0] - ref))
        assert errs[0] <= 1e-3
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)

    def test_map_is_linear(self):
        grid = TimeGrid(1.0, 50)
        m = PathDependentModel.constant(0.7, grid)
        H = path_dependent_map(m)
        a, b = smooth_paths(grid, 2, 1)
        np.testing.assert_allclose(H(a + b).values, H(a).values + H(b).values, atol=1e-13)

    def test_om_constant(self, unit_grid):
        assert path_dependent_om_constant(PathDependentModel.constant(1.0, unit_grid)) == pytest.approx(0.5)

    def test_om_eps_validation(self, unit_grid):
        m = PathDependentModel.constant(1.0, unit_grid)
        with pytest.raises(ValueError):
            path_dependent_om(m, DiscretePath(unit_grid, np.zeros(1001)), 0.0)


class TestAlgebraic:
    def test_zero(self):
        sys_ = AlgebraicSystem(harmonic_weights(10))
        value, z = algebraic_fw(sys_, np.zeros(10))
        assert value == 0.0 and not np.any(z.values)

    def test_basel(self):
        N = 10**6
        sys_ = AlgebraicSystem(harmonic_weights(N))
        value, z = algebraic_fw(sys_, np.ones(N))
        assert value == pytest.approx(BASEL_HALF, abs=1e-5)
        np.testing.assert_allclose(z.values, harmonic_weights(N) ** 2)
        np.testing.assert_allclose(z.coordinates, 1.0)

    def test_linear_factorization(self):
        N = 10**6
        w = harmonic_weights(N)
        base, _ = algebraic_fw(AlgebraicSystem(w), np.ones(N))
        lin, _ = algebraic_fw(AlgebraicSystem(w, preset_map("linear", kappa=0.5)), np.ones(N))
        assert lin == pytest.approx(0.205617, abs=1e-5)
        assert lin == 0.25 * base

    @given(st.floats(-0.9, 0.9), st.lists(st.floats(-10, 10), min_size=5, max_size=5))
    def test_linear_factorization_exact(self, kappa, phi):
        # exact equality holds for kappa = 0.5; general kappa agrees to rounding
        w = harmonic_weights(5)
        lin, _ = algebraic_fw(AlgebraicSystem(w, preset_map("linear", kappa=kappa)), phi)
        base, _ = algebraic_fw(AlgebraicSystem(w), phi)
        assert lin == pytest.approx((1 - kappa) ** 2 * base, rel=1e-12, abs=1e-300)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            algebraic_fw(AlgebraicSystem(harmonic_weights(3)), np.ones(4))

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            AlgebraicSystem([1.0, 0.0])

    def test_solve_identity(self):
        w = harmonic_weights(20)
        rng = np.random.default_rng(0)
        noise = WeightedSequence(w, w * rng.standard_normal(20))
        x = algebraic_solve(AlgebraicSystem(w), noise, 0.3)
        np.testing.assert_array_equal(x.values, 0.3 * noise.values)

    def test_solve_linear(self):
        w = harmonic_weights(8)
        noise = WeightedSequence(w, np.full(8, 2.0))
        x = algebraic_solve(AlgebraicSystem(w, preset_map("linear", kappa=0.5)), noise, 0.5)
        np.testing.assert_allclose(x.values, 2.0, atol=1e-12)

    def test_solve_residual(self):
        w = harmonic_weights(500)
        sys_ = AlgebraicSystem(w, preset_map("tanh"))
        rng = np.random.default_rng(1)
        for eps in (1.0, 0.1):
            noise = WeightedSequence(w, w * rng.standard_normal(500))
            x = algebraic_solve(sys_, noise, eps)
            assert np.max(np.abs(x.values - sys_.f(x.values) - eps * noise.values)) <= 1e-12

    def test_solve_failure_report(self):
        w = harmonic_weights(4)
        expanding = AlgebraicSystem(w, lambda x, n: np.where(n == 3, 2.0 * x + 1.0, 0.0 * x))
        with pytest.raises(AlgebraicSolveError) as info:
            algebraic_solve(expanding, WeightedSequence(w, np.ones(4)), 1.0, max_iter=50)
        assert list(info.value.failed) == [2]
