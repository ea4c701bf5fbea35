import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from allocator.closed_form_policy import theta_u_closed_form
from allocator.errors import NumericalFailure
from allocator.market_model import BlackScholesModel, CALIBRATED_PARAMS, HestonModel, VasicekToyModel
from allocator.malliavin_engine import (AnalyticThetaU, FieldOutOfRange, MCConfig, SolverGrid,
                                        ThetaUField, ZeroThetaU, heston_grid, residual_diagnostics,
                                        solve_theta_u)
from allocator.utility import UtilitySpec

P = CALIBRATED_PARAMS
MODEL = HestonModel(P)


class TestThetaUField:
    times = np.array([0.0, 0.5, 1.0])

    def linear_field(self, states):
        vals = np.zeros((3, len(states), 2))
        for k, t in enumerate(self.times):
            vals[k, :, 1] = (1 + t) * (0.2 + 3.0 * states)
        return ThetaUField(self.times, states, vals)

    @given(st.floats(0.0, 0.1), st.sampled_from([0.0, 0.2, 0.5, 0.7, 1.0]))
    def test_reproduces_linear_functions(self, v, t):
        for states in (np.linspace(0, 0.1, 11), np.array([0.0, 0.01, 0.03, 0.07, 0.1])):
            f = self.linear_field(states)
            k = f.time_index(t)
            out = f.value(t, np.array([[v]]))
            assert out[0, 1] == pytest.approx((1 + self.times[k]) * (0.2 + 3 * v), rel=1e-12)
            assert f.grad(t, np.array([[v]]))[0, 0, 1] == pytest.approx((1 + self.times[k]) * 3.0, rel=1e-10)

    def test_left_constant_in_time(self):
        f = self.linear_field(np.linspace(0, 0.1, 5))
        y = np.array([[0.05]])
        assert f.value(0.49, y)[0, 1] == f.value(0.0, y)[0, 1]
        assert f.value(0.5, y)[0, 1] == f.value(0.99, y)[0, 1]

    def test_clamped_below_extrapolated_above(self):
        f = self.linear_field(np.linspace(0, 0.1, 5))
        assert f.value(0.0, np.array([[-0.3]]))[0, 1] == pytest.approx(0.2)
        assert f.value(0.0, np.array([[0.2]]))[0, 1] == pytest.approx(0.8)

    def test_value_and_grad_agree(self):
        f = self.linear_field(np.linspace(0, 0.1, 7))
        y = np.linspace(-0.01, 0.13, 17)[:, None]
        v, g = f.value_and_grad(0.6, y)
        np.testing.assert_array_equal(v, f.value(0.6, y))
        np.testing.assert_array_equal(g, f.grad(0.6, y))

    def test_out_of_range(self):
        f = self.linear_field(np.linspace(0, 0.1, 5))
        with pytest.raises(FieldOutOfRange):
            f.value(1.2, np.array([[0.01]]))
        with pytest.raises(FieldOutOfRange):
            f.value(-0.1, np.array([[0.01]]))

    def test_immutable_and_with_slice(self):
        f = self.linear_field(np.linspace(0, 0.1, 5))
        g = f.with_slice(1, np.ones((5, 2)))
        assert np.all(g.values[1] == 1) and not np.all(f.values[1] == 1)
        with pytest.raises(ValueError):
            f.values[0, 0, 0] = 3.0

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            ThetaUField([0.0, 1.0], [0.0, 0.1], np.zeros((3, 2, 2)))
        with pytest.raises(ValueError):
            SolverGrid(np.array([0.0, 0.0]), np.array([0.0, 1.0]))

    def test_csv(self, tmp_path):
        f = self.linear_field(np.linspace(0, 0.1, 5))
        lines = f.to_csv(tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "t,V,theta_u_1,theta_u_2" and len(lines) == 16

    def test_analytic_field_matches_closed_form(self):
        f = AnalyticThetaU(P, 4.0, 2.0)
        V = np.linspace(0, 0.08, 9)
        np.testing.assert_allclose(f.value(0.7, V[:, None]), theta_u_closed_form(0.7, V, 2.0, P, 4.0), rtol=1e-14)


class TestSolver:
    grid = heston_grid(P, 1.0, n_time=3, n_state=5)
    mc = MCConfig(n_paths=300, seed=4)

    @pytest.fixture(scope="class")
    @classmethod
    def solved(cls):
        return solve_theta_u(MODEL, UtilitySpec(4.0), cls.grid, cls.mc)

    def test_exact_zeros(self, solved):
        assert np.all(solved.values[-1] == 0)
        assert np.all(solved.values[:, 0, :] == 0)
        assert np.all(solved.values[..., 0] == 0)

    def test_rough_agreement(self, solved):
        cf = theta_u_closed_form(self.grid.times[:, None], self.grid.states[None, :], 1.0, P, 4.0)
        assert np.max(np.abs(solved.values - cf)) < 0.02
        assert solved.se.shape == solved.values.shape
        assert solved.info["paths_per_node"] == 300 and solved.info["iterations"][-1] == 0

    def test_lambda_rescaling(self, solved):
        again = solve_theta_u(MODEL, UtilitySpec(4.0), self.grid, self.mc, lambda_t=10.0)
        np.testing.assert_allclose(again.values, solved.values, rtol=1e-9, atol=1e-12)

    def test_hara_reduces_to_crra(self, solved):
        hara = solve_theta_u(MODEL, UtilitySpec(4.0, xbar=1.0), self.grid, self.mc)
        np.testing.assert_array_equal(hara.values, solved.values)
        assert hara.info["reduced"]

    def test_unreduced_hara_close(self, solved):
        full = solve_theta_u(MODEL, UtilitySpec(4.0, xbar=1.0), self.grid, self.mc, reduced=False, lambda_t=0.5)
        # the floor terms vanish in expectation; what remains is sampling noise
        assert np.all(np.abs(full.values - solved.values) <= 3 * (full.se + solved.se) + 1e-12)

    def test_complete_market(self):
        bs = BlackScholesModel(0.08, 0.2, 0.02)
        f = solve_theta_u(bs, UtilitySpec(4.0), SolverGrid(np.linspace(0, 1, 3), np.array([0.0, 1.0])), self.mc)
        assert np.all(f.values == 0) and f.info["complete_market"]

    def test_random_rate_hara_rejected(self):
        grid = SolverGrid(np.linspace(0, 1, 3), np.linspace(0.0, 0.06, 4))
        with pytest.raises(ValueError):
            solve_theta_u(VasicekToyModel(), UtilitySpec(4.0, xbar=1.0), grid, self.mc)

    def test_non_convergence(self):
        with pytest.raises(NumericalFailure) as err:
            solve_theta_u(MODEL, UtilitySpec(4.0), heston_grid(P, 1.0, 3, 5), self.mc, tol=0.0, max_iter=2)
        assert err.value.residual is not None

    def test_bad_damping(self):
        with pytest.raises(ValueError):
            solve_theta_u(MODEL, UtilitySpec(4.0), self.grid, self.mc, damping=0.0)

    def test_progress_callback(self):
        calls = []
        solve_theta_u(MODEL, UtilitySpec(4.0), self.grid, MCConfig(n_paths=50), progress=lambda *a: calls.append(a))
        assert [c[0] for c in calls] == [1, 0]


class TestResiduals:
    def test_complete_market_zero(self):
        bs = BlackScholesModel(0.08, 0.2, 0.02)
        rep = residual_diagnostics(bs, ZeroThetaU(1, 1.0), UtilitySpec(4.0), MCConfig(n_paths=200),
                                   y0=[0.0], points=[(0.3, [0.0])])
        assert rep["lemma"]["estimate"] == [0.0]
        assert rep["fixed_point"][0]["residual"] == [0.0]
        assert rep["kernel"]["max_abs_sigma_theta_u"] == 0.0

    def test_analytic_field(self):
        field = AnalyticThetaU(P, 4.0, 1.0)
        rep = residual_diagnostics(MODEL, field, UtilitySpec(4.0), MCConfig(n_paths=4000, seed=2, dt=1 / 504),
                                   points=[(0.25, [P.theta_bar])])
        assert rep["lemma"]["deterministic_rate"]
        assert all(abs(z) < 3 for z in rep["lemma"]["z"])
        fp = rep["fixed_point"][0]
        assert abs(fp["residual"][1]) < max(3 * fp["se"][1], 2e-3)
        assert fp["residual"][0] == 0.0
        assert rep["kernel"]["max_abs_sigma_theta_u"] == 0.0

    def test_grid_field_kernel(self):
        f = ThetaUField([0.0, 1.0], [0.0, 0.1], np.zeros((2, 2, 2)))
        rep = residual_diagnostics(MODEL, f, UtilitySpec(4.0), MCConfig(n_paths=50))
        assert rep["kernel"]["max_abs_sigma_theta_u"] == 0.0
