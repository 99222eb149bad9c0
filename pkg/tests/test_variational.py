import math

import numpy as np
import pytest

from conftest import smooth_paths
from mlpath.functionals import fw_objective, om_objective
from mlpath.measure import DiscretePath, TimeGrid
from mlpath.models import preset_drift
from mlpath.variational import (
    Constraints,
    DomainError,
    coercivity_probe,
    eps_sweep,
    euler_lagrange_residual,
    gamma_diagnostic,
    minimize,
    multi_start,
    straight_line,
)
from oracles import ou_pinned_fw, ou_pinned_mode

OU = preset_drift("ou", theta=1.0)
DW = preset_drift("double_well")
ZERO = preset_drift("zero")

# continuum FW action of the double-well instanton on [0, 5] from -1 to 1
# (scipy solve_bvp, tol 1e-10; tests/oracles.py)
INSTANTON_FW = 0.5798547732699729


def non_increasing(history):
    h = np.asarray(history)
    return np.all(np.diff(h) <= 1e-12 * np.maximum(1.0, np.abs(h[:-1])))


class TestConstraints:
    def test_finite(self):
        with pytest.raises(ValueError):
            Constraints(pin_start=math.nan)

    def test_free_mask(self):
        np.testing.assert_array_equal(Constraints(0.0, 1.0).free_mask(4), [False, True, True, False])
        np.testing.assert_array_equal(Constraints(None, None).free_mask(3), [True, True, True])


class TestMinimize:
    def test_zero_drift_line(self, unit_grid):
        cons = Constraints(0.0, 1.0)
        init = DiscretePath(unit_grid, np.r_[0.0, np.full(999, 0.3), 1.0])
        res = minimize(fw_objective(ZERO, unit_grid), init, cons)
        assert res.converged
        assert res.value == pytest.approx(0.5, abs=1e-6)
        np.testing.assert_allclose(res.path.values, unit_grid.nodes, atol=1e-7)

    def test_ou_sinh(self, unit_grid):
        cons = Constraints(0.0, 1.0)
        res = minimize(fw_objective(OU, unit_grid), straight_line(unit_grid, cons), cons)
        assert res.converged
        assert res.path.sup_distance(DiscretePath(unit_grid, ou_pinned_mode(unit_grid.nodes))) <= 1e-5
        assert res.value == pytest.approx(ou_pinned_fw(), abs=1e-5)

    def test_free_end_zero_drift(self, unit_grid):
        cons = Constraints(0.0, None)
        init = smooth_paths(unit_grid, 1, 0)[0]
        res = minimize(fw_objective(ZERO, unit_grid), init, cons)
        assert res.converged
        assert res.value == pytest.approx(0.0, abs=1e-12)
        assert np.max(np.abs(res.path.values)) <= 1e-6

    def test_history_non_increasing(self):
        grid = TimeGrid(5.0, 400)
        cons = Constraints(-1.0, 1.0)
        for eps in (1.0, 0.3, 0.05):
            res = minimize(om_objective(DW, grid, eps, start=-1.0), straight_line(grid, cons), cons)
            assert non_increasing(res.history)
            assert res.converged

    def test_domain_errors(self, unit_grid):
        cons = Constraints(0.0, 1.0)
        with pytest.raises(DomainError):
            minimize(fw_objective(OU, unit_grid), DiscretePath(unit_grid, np.zeros(1001)), cons)
        # objective pinned at 1 while the constraint pins 0: infinite at init
        with pytest.raises(DomainError):
            minimize(fw_objective(OU, unit_grid, start=1.0), straight_line(unit_grid, cons), cons)

    def test_not_converged_is_not_an_error(self, unit_grid):
        cons = Constraints(0.0, 1.0)
        res = minimize(fw_objective(DW, unit_grid), straight_line(unit_grid, cons), cons, max_iter=1, tol=1e-14)
        assert not res.converged
        assert res.iterations == 1

    @pytest.mark.parametrize("drift", [ZERO, OU, DW], ids=lambda d: d.name)
    def test_converged_results_are_stationary(self, drift):
        grid = TimeGrid(2.0, 300)
        cons = Constraints(0.0, 0.8)
        res = minimize(fw_objective(drift, grid), straight_line(grid, cons), cons)
        assert res.converged and res.grad_norm <= 1e-8
        assert euler_lagrange_residual(drift, res.path) <= 10 * 1e-8
        om = minimize(om_objective(drift, grid, 0.5), straight_line(grid, cons), cons)
        assert euler_lagrange_residual(drift, om.path, "om", 0.5) <= 10 * 1e-8


class TestMultiStart:
    def test_convex_has_one_minimum(self):
        grid = TimeGrid(1.0, 200)
        cons = Constraints(0.0, 1.0)
        starts = smooth_paths(grid, 5, 1, start=0.0, end=1.0, amplitude=2.0)
        found = multi_start(fw_objective(OU, grid), starts, cons)
        assert len(found) == 1 and found[0].converged

    def test_double_well(self):
        grid = TimeGrid(5.0, 500)
        cons = Constraints(-1.0, 1.0)
        line = straight_line(grid, cons)
        kink = np.tanh(4 * (grid.nodes - 2.5))
        kink[0], kink[-1] = -1.0, 1.0
        reflected = DiscretePath(grid, kink)
        found = multi_start(fw_objective(DW, grid, -1.0), [line, reflected], cons)
        assert len(found) >= 1
        assert all(r.grad_norm <= 1e-8 for r in found)
        assert found[0].value == pytest.approx(INSTANTON_FW, abs=5e-5)
        assert [r.value for r in found] == sorted(r.value for r in found)

    def test_starts_must_satisfy_pins(self, unit_grid):
        with pytest.raises(DomainError):
            multi_start(fw_objective(OU, unit_grid), [DiscretePath(unit_grid, np.zeros(1001))], Constraints(0.0, 1.0))
        with pytest.raises(ValueError):
            multi_start(fw_objective(OU, unit_grid), [], Constraints(0.0, 1.0))

    def test_thread_independent(self, monkeypatch):
        grid = TimeGrid(5.0, 200)
        cons = Constraints(-1.0, 1.0)
        starts = smooth_paths(grid, 4, 2, start=-1.0, end=1.0)
        monkeypatch.setenv("MLPATH_THREADS", "1")
        a = multi_start(fw_objective(DW, grid, -1.0), starts, cons)
        monkeypatch.setenv("MLPATH_THREADS", "4")
        b = multi_start(fw_objective(DW, grid, -1.0), starts, cons)
        assert [r.path for r in a] == [r.path for r in b]


class TestEpsSweep:
    def test_ou_argmin_invariance(self):
        grid = TimeGrid(1.0, 500)
        res = eps_sweep(OU, grid, Constraints(0.0, 1.0), [1.0, 0.5, 0.2, 0.1, 0.05])
        assert max(res.distances) <= 1e-8

    def test_zero_drift_is_line(self):
        grid = TimeGrid(1.0, 100)
        cons = Constraints(0.0, 2.0)
        res = eps_sweep(ZERO, grid, cons, [1.0, 0.1])
        for _, m in res.entries:
            np.testing.assert_allclose(m.path.values, 2 * grid.nodes, atol=1e-12)
        np.testing.assert_allclose(res.fw_mode.path.values, 2 * grid.nodes, atol=1e-12)

    def test_linear_drift_modes_agree_across_eps(self):
        grid = TimeGrid(2.0, 300)
        res = eps_sweep(preset_drift("ou", theta=2.0), grid, Constraints(0.5, -0.5), [2.0, 0.7, 0.01])
        paths = [m.path for _, m in res.entries]
        assert all(p.sup_distance(paths[0]) <= 1e-8 for p in paths)

    def test_deterministic(self):
        grid = TimeGrid(5.0, 200)
        cons = Constraints(-1.0, 1.0)
        a = eps_sweep(DW, grid, cons, [0.5, 0.2, 0.1])
        b = eps_sweep(DW, grid, cons, [0.5, 0.2, 0.1])
        assert a.distances == b.distances
        assert all(x[1].path == y[1].path for x, y in zip(a.entries, b.entries))

    def test_double_well_trend_and_oracle(self):
        # the gap between OM and FW modes is O(eps^2); the frozen continuum
        # distances come from solve_bvp on both Euler-Lagrange equations
        continuum = {0.2: 0.09120510509001423, 0.1: 0.020669032053796443, 0.05: 0.005031841829064909}
        grid = TimeGrid(5.0, 1000)
        res = eps_sweep(DW, grid, Constraints(-1.0, 1.0), [1.0, 0.5, 0.2, 0.1, 0.05])
        assert all(b < a for a, b in zip(res.distances, res.distances[1:]))
        for eps, d in zip(res.eps, res.distances):
            if eps in continuum:
                assert d == pytest.approx(continuum[eps], rel=2e-3)
        assert res.fw_mode.value == pytest.approx(INSTANTON_FW, abs=1e-5)

    @pytest.mark.parametrize("bad", [[], [0.5, 1.0], [1.0, 1.0], [1.0, -0.1]])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            eps_sweep(OU, TimeGrid(1.0, 10), Constraints(0.0, 1.0), bad)

    def test_fine_reference(self):
        grid = TimeGrid(1.0, 50)
        res = eps_sweep(OU, grid, Constraints(0.0, 1.0), [1.0, 0.1], fw_reference_factor=4)
        assert res.reference.path.grid == grid.refine(4)
        # OU modes differ from the sinh oracle by O(dt^2) on either grid
        assert max(res.reference_distances) <= 1e-4


class TestEulerLagrange:
    def test_straight_line(self):
        # the residual is a second difference divided by dt^2, so nodal
        # round-off is amplified by n^2; n = 100 keeps it well below 1e-10
        grid = TimeGrid(1.0, 100)
        assert euler_lagrange_residual(ZERO, straight_line(grid, Constraints(0.0, 1.0))) <= 1e-10

    def test_sinh_is_second_order(self):
        r = []
        for n in (100, 200, 400):
            g = TimeGrid(1.0, n)
            r.append(euler_lagrange_residual(OU, DiscretePath(g, ou_pinned_mode(g.nodes))))
        assert r[0] / r[1] == pytest.approx(4.0, rel=0.05)
        assert r[1] / r[2] == pytest.approx(4.0, rel=0.05)

    def test_random_path(self, unit_grid):
        z = smooth_paths(unit_grid, 1, 3, start=0.0, end=1.0)[0]
        assert euler_lagrange_residual(DW, z) > 0.1

    def test_om_needs_eps(self, unit_grid):
        with pytest.raises(ValueError):
            euler_lagrange_residual(DW, straight_line(unit_grid, Constraints(0.0, 1.0)), "om")


class TestGammaDiagnostic:
    def setup_method(self):
        self.grid = TimeGrid(1.0, 20)
        self.cons = Constraints(0.0, 1.0)
        self.mode = minimize(fw_objective(OU, self.grid), straight_line(self.grid, self.cons), self.cons).path
        self.free = self.cons.free_mask(self.grid.n_nodes)

    def test_constant_family(self):
        fw = fw_objective(OU, self.grid)
        rep = gamma_diagnostic(lambda e: fw, self.mode, [1e-2, 1e-3], [0.1, 0.01, 0.001], probes=64, free=self.free)
        for row in rep.rows:
            assert row.liminf == row.limsup
        assert rep.rows[-1].liminf == pytest.approx(fw.value(self.mode), abs=1e-6)
        assert rep.recovery_gap <= 1e-12

    def test_ou_liminf(self):
        fw = fw_objective(OU, self.grid)
        rep = gamma_diagnostic(
            lambda e: om_objective(OU, self.grid, e), self.mode, [1e-2, 1e-3], [0.1, 0.03, 0.01, 0.003, 0.001],
            limit=fw, free=self.free,
        )
        assert rep.liminf_ok(1e-3)
        assert rep.recovery_gap <= 1e-8

    def test_homogeneity(self):
        fam = lambda e: om_objective(DW, self.grid, e)
        a = gamma_diagnostic(fam, self.mode, [0.05], [0.5, 0.2], probes=32, free=self.free)
        b = gamma_diagnostic(lambda e: fam(e).scaled(2.0), self.mode, [0.05], [0.5, 0.2], probes=32, free=self.free)
        np.testing.assert_allclose(b.rows[0].infima, 2 * np.array(a.rows[0].infima), rtol=1e-14)

    def test_validation(self):
        with pytest.raises(ValueError):
            gamma_diagnostic(lambda e: fw_objective(OU, self.grid), self.mode, [0.1, 0.2], [0.1])


def test_coercivity_probe():
    grid = TimeGrid(1.0, 50)
    cons = Constraints(0.0, 1.0)
    out = coercivity_probe(fw_objective(DW, grid), straight_line(grid, cons), cons)
    assert out["coercive_hint"]
