import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.config import TIE_BAND
from app.models.hybrid import DwellTimeSpec, GuardGeometry
from app.models.schemas import DwellKind, RegionLabel, StabilityCase
from app.services.hybrid_service import in_flow_set, in_jump_set
from app.services.lyapunov_service import (
    AssumptionViolated,
    GuardSampler,
    SingularDesign,
    branch_values,
    check_flow_lmis,
    check_jump_conditions,
    class_k_bounds,
    classify,
    closed_loop_matrices,
    derive_constants,
    estimate_sublevel,
    gbar,
    gbar_inverse,
    jump_matrix,
    lyapunov_equation_residual,
    lyapunov_solution,
    lyapunov_value,
    stability_verdict,
    sweep_gains,
    tightest_flow_rate,
    tightest_jump_rate,
    verify_assumption3,
)
from app.services.scenario_service import bouncing_ball_config, scenario_from_config

BALL = scenario_from_config(bouncing_ball_config())


class TestJumpMap:
    def test_gbar_is_the_jump_map_below_the_guard(self, ball):
        np.testing.assert_allclose(gbar(ball.system, ball.design, [0.0, -3.0]), [0.0, 3.0])

    def test_gbar_lifts_above_the_guard(self, ball):
        # s max(0, z1 x) L J adds -x2 to the first coordinate
        np.testing.assert_allclose(gbar(ball.system, ball.design, [0.0, 3.0]), [-3.0, -3.0])

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 0))
    def test_inverse_round_trip(self, x1, x2):
        x = np.array([x1, x2])
        np.testing.assert_allclose(gbar_inverse(BALL.system, BALL.design, gbar(BALL.system, BALL.design, x)), x, atol=1e-12)

    def test_singular_design(self, ball):
        design = replace(ball.design, M=np.array([-1.0, 0.0]))
        with pytest.raises(SingularDesign):
            jump_matrix(ball.system, design)


class TestLyapunovFunction:
    def test_zero_on_the_diagonal(self, ball):
        assert lyapunov_value(ball.design, ball.system, [1.0, 2.0], [1.0, 2.0]) == (0.0, RegionLabel.S0)

    def test_zero_across_a_jump(self, ball):
        value, region = lyapunov_value(ball.design, ball.system, [0.0, -3.0], [0.0, 3.0])
        assert value == pytest.approx(0.0, abs=1e-12)
        assert region == RegionLabel.S2
        value, region = lyapunov_value(ball.design, ball.system, [0.0, 3.0], [0.0, -3.0])
        assert value == pytest.approx(0.0, abs=1e-12)
        assert region == RegionLabel.S1

    def test_ties_go_to_the_lowest_region(self):
        assert classify(np.array([[1.0, 1.0, 2.0], [3.0, 2.0, 2.0]])).tolist() == [0, 1]

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 5), st.floats(-5, 5), st.floats(0, 5), st.floats(-5, 5))
    def test_value_is_the_smallest_branch(self, x1, x2, y1, y2):
        x, y = np.array([x1, x2]), np.array([y1, y2])
        values = branch_values(BALL.system, BALL.design, x, y)[0]
        value, region = lyapunov_value(BALL.design, BALL.system, x, y)
        assert value == pytest.approx(values.min(), abs=TIE_BAND)
        assert value >= 0.0
        assert values[region.index] == value


class TestMatrixConditions:
    def test_ball_conditions_hold(self, ball):
        jump = check_jump_conditions(ball.design, ball.system)
        assert jump.ok
        assert jump.gate == -1.0
        flow = check_flow_lmis(ball.system, ball.design, ball.controller)
        assert flow.ok
        assert max(flow.eig_margins) < 0

    def test_oscillator_conditions_hold(self, oscillator):
        assert check_jump_conditions(oscillator.design, oscillator.system).ok
        assert check_flow_lmis(oscillator.system, oscillator.design, oscillator.controller).ok

    def test_scaled_jump_map_fails(self, ball):
        system = replace(ball.system, L=-1.5 * np.eye(2))
        report = check_jump_conditions(ball.design, system)
        assert not report.ok
        assert report.eig_margins[0] == pytest.approx(1.25 * np.linalg.eigvalsh(ball.design.Ps)[-1])

    def test_tightest_rates(self, ball, oscillator):
        assert tightest_jump_rate(ball.system, ball.design) == pytest.approx(0.0, abs=1e-12)
        assert tightest_jump_rate(oscillator.system, oscillator.design) == pytest.approx(math.log(0.9))
        assert tightest_flow_rate(ball.system, ball.design, ball.controller) <= -0.25

    def test_sweep_ranks_gains(self, ball):
        table = sweep_gains(ball.system, ball.design, [[-1.0, -0.5], [0.0, 0.0], [-2.0, -1.0]])
        rates = [rate for _, rate in table]
        assert rates == sorted(rates)
        # without feedback the ball's error dynamics do not decay
        assert dict((tuple(c), rate) for c, rate in table)[(0.0, 0.0)] >= 0

    def test_lyapunov_equation_cross_check(self, ball):
        c = ball.controller
        for Acl in closed_loop_matrices(ball.system, ball.design, c.c0, c.c1, c.c2):
            P = lyapunov_solution(Acl, np.eye(2))
            assert lyapunov_equation_residual(Acl, P, np.eye(2)) < 1e-10
            assert np.all(np.linalg.eigvalsh(P) > 0)


class TestSublevel:
    def test_ball_constants(self, ball):
        estimate = estimate_sublevel(ball.system, ball.design, ball.geometry)
        assert estimate.delta1 == pytest.approx(0.0031187, rel=1e-3)
        assert estimate.vL == pytest.approx(1.55e-5, rel=1e-2)
        assert estimate.lambda_lo == pytest.approx(1.6096, rel=1e-4)
        assert estimate.ell_g == pytest.approx(1.0)
        assert set(estimate.bounds) == {"separation", "image_plus", "image_minus", "half_band"}

    def test_scaling_the_design(self, ball):
        doubled = replace(ball.design, P0=2 * ball.design.P0, Ps=2 * ball.design.Ps)
        base = estimate_sublevel(ball.system, ball.design, ball.geometry)
        scaled = estimate_sublevel(ball.system, doubled, ball.geometry)
        assert scaled.delta1 == pytest.approx(base.delta1)
        assert scaled.vL == pytest.approx(2 * base.vL)
        assert scaled.lambda_lo == pytest.approx(2 * base.lambda_lo)

    def test_class_k_bounds(self, ball):
        bounds = class_k_bounds(ball.system, ball.design, ball.geometry)
        assert bounds.kappa == pytest.approx(1.0 + math.sqrt(2.0) / ball.geometry.z5)
        assert bounds.alpha1 == pytest.approx(bounds.alpha1_nominal / bounds.kappa**2)
        assert bounds.alpha1 < bounds.alpha2

    def test_derive_constants(self, ball):
        design = derive_constants(ball.system, ball.design, ball.geometry)
        assert design.derived is not None
        assert design.derived.vL == pytest.approx(estimate_sublevel(ball.system, ball.design, ball.geometry).vL)
        assert ball.design.derived is None


class TestGuardSeparation:
    def test_sampler_draws_from_the_requested_sets(self, ball):
        sampler = GuardSampler(ball.system, seed=1)
        assert all(in_jump_set(ball.system, x) for x in sampler.jump_set(200))
        assert all(in_flow_set(ball.system, x) for x in sampler.flow_set(200))
        lower = sampler.lower_half(200)
        assert np.all(lower[:, 1] <= 1e-12)

    @pytest.mark.parametrize("name", ["ball", "oscillator"])
    def test_examples_satisfy_the_conditions(self, name, request):
        scenario = request.getfixturevalue(name)
        report = verify_assumption3(scenario.system, scenario.geometry)
        assert report.ok
        assert report.samples == 10_000

    def test_violation_names_the_condition(self, ball):
        with pytest.raises(AssumptionViolated) as info:
            verify_assumption3(ball.system, GuardGeometry(z3=1.0, z4=0.001, z5=0.5), samples=500)
        assert info.value.bullet == 1
        assert in_jump_set(ball.system, ball.system.L_inv @ info.value.witness)


class TestVerdict:
    def test_ball_is_case1(self, ball):
        verdict = stability_verdict(derive_constants(ball.system, ball.design, ball.geometry))
        assert verdict.case == StabilityCase.CASE1
        assert verdict.basin_constant == 1.0
        assert verdict.basin_level == pytest.approx(1.55e-5, rel=1e-2)

    def test_oscillator_needs_a_dwell_time(self, oscillator):
        assert stability_verdict(oscillator.design).case == StabilityCase.INCONCLUSIVE
        dwell = DwellTimeSpec(tau=3.0, N0=2.0, kind=DwellKind.MAXIMAL_AVERAGE)
        verdict = stability_verdict(oscillator.design, dwell)
        assert verdict.case == StabilityCase.CASE3
        assert verdict.basin_constant == 1.0

    def test_case2(self, ball):
        design = replace(ball.design, lambda_c=0.0, lambda_d=-0.1)
        minimal = DwellTimeSpec(tau=1.0, N0=2.0, kind=DwellKind.MINIMAL_AVERAGE)
        verdict = stability_verdict(design, minimal)
        assert verdict.case == StabilityCase.CASE2
        assert verdict.margins["rate"] == pytest.approx(-0.1)
