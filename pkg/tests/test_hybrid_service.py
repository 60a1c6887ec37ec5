import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.models.hybrid import AffineHybridSystem, HybridTimeDomain, InvalidDomain, InvalidSystem
from app.models.schemas import DwellKind, SimulationLimits, Termination
from app.models.hybrid import DwellTimeSpec
from app.services.hybrid_service import (
    NotInJumpSet,
    OutsideStateSpace,
    apply_jump,
    check_inter_jump_time,
    guard_values,
    in_flow_set,
    in_jump_set,
    measure_dwell_time,
    sample_grid,
    simulate,
    validate_arc,
)

G = 9.81


class TestGuard:
    def test_guard_values(self, ball):
        assert guard_values(ball.system, [0.0, -3.0]) == (0.0, -3.0)
        assert guard_values(ball.system, [0.0, 0.0]) == (0.0, 0.0)
        assert guard_values(ball.system, [2.0, 5.0]) == (-2.0, 5.0)

    def test_jump_set_membership(self, ball):
        sys = ball.system
        assert in_jump_set(sys, [0.0, -3.0])
        assert not in_jump_set(sys, [2.0, 5.0])
        # inside the jump margin
        assert not in_jump_set(sys, [0.0, -0.005])
        assert in_jump_set(sys, [0.0, -0.01])

    def test_flow_set_membership(self, ball):
        sys = ball.system
        assert in_flow_set(sys, [1.0, 0.0])
        assert in_flow_set(sys, [0.0, -3.0])
        assert not in_flow_set(sys, [-1.0, 0.0])
        assert not in_flow_set(sys, [0.001, 0.0])

    def test_apply_jump_reverses_velocity(self, ball, oscillator):
        np.testing.assert_allclose(apply_jump(ball.system, [0.0, -3.0]), [0.0, 3.0])
        np.testing.assert_allclose(apply_jump(oscillator.system, [0.0, -10.0]), [0.0, 9.0])

    def test_apply_jump_outside_jump_set(self, ball):
        with pytest.raises(NotInJumpSet):
            apply_jump(ball.system, [2.0, 5.0])

    def test_singular_jump_map_rejected(self):
        with pytest.raises(InvalidSystem):
            AffineHybridSystem(
                A=np.zeros((2, 2)), B=[0, 1], E=[0, 0], L=[[1, 0], [0, 0]], H=[0, 0],
                J=[-1, 0], K=0, z1=[0, 1], z2=0, s=-1,
            )


class TestSimulate:
    def test_ball_impact_times(self, ball_reference):
        arc = ball_reference
        assert arc.termination == Termination.HORIZON_REACHED
        period = 2 * 10.0 / G
        assert arc.domain.jump_count == int(15.0 // period)
        np.testing.assert_allclose(arc.domain.jump_times[:5], period * np.arange(1, 6), rtol=0, atol=1e-9)
        np.testing.assert_allclose(arc.domain.jump_times, period * np.arange(1, 8), rtol=1e-9)

    def test_ball_impacts_are_lossless(self, ball_reference):
        for jump in ball_reference.jumps:
            assert abs(jump.pre[0]) < 1e-9
            assert jump.pre[1] == pytest.approx(-10.0, rel=1e-6)
            np.testing.assert_allclose(jump.post, -jump.pre)

    def test_jump_rows_repeat_the_time(self, ball_reference):
        t, j, _ = ball_reference.samples()
        repeated = np.flatnonzero(np.diff(j) == 1)
        assert repeated.size == ball_reference.domain.jump_count
        np.testing.assert_array_equal(t[repeated], t[repeated + 1])

    def test_ball_arc_is_consistent(self, ball, ball_reference):
        assert validate_arc(ball.system, ball_reference) == []

    def test_sample_spacing(self, ball_reference):
        for segment in ball_reference.segments:
            if segment.t.size > 1:
                assert np.max(np.diff(segment.t)) <= 1e-3 + 1e-12

    def test_zero_horizon(self, ball):
        arc = simulate(ball.system, [0.0, 10.0], 0.0, 0.0)
        assert arc.domain.jump_count == 0
        t, j, x = arc.samples()
        assert t.tolist() == [0.0]
        np.testing.assert_array_equal(x, [[0.0, 10.0]])

    def test_initial_state_in_jump_set_jumps_first(self, ball):
        arc = simulate(ball.system, [0.0, -3.0], 0.0, 0.1)
        assert arc.jumps[0].t == 0.0
        np.testing.assert_allclose(arc.jumps[0].post, [0.0, 3.0])

    def test_initial_state_outside(self, ball):
        with pytest.raises(OutsideStateSpace):
            simulate(ball.system, [-1.0, 0.0], 0.0, 1.0)

    def test_max_jumps_guard(self, ball):
        arc = simulate(ball.system, [0.0, 10.0], 0.0, 15.0, limits=SimulationLimits(max_jumps=3))
        assert arc.termination == Termination.ZENO_LIMIT
        assert len(arc.jumps) == 3

    def test_oscillator_reference_keeps_jumping(self, oscillator, oscillator_reference):
        arc = oscillator_reference
        assert arc.termination == Termination.HORIZON_REACHED
        assert arc.domain.jump_count >= 5
        assert validate_arc(oscillator.system, arc) == []

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.5, 20.0), st.floats(-5.0, 5.0))
    def test_ball_energy_is_conserved_along_flow(self, height, velocity):
        from app.services.scenario_service import bouncing_ball_config, scenario_from_config

        sys = scenario_from_config(bouncing_ball_config()).system
        arc = simulate(sys, [height, velocity], 0.0, 1.0)
        t, _, x = arc.samples()
        energy = G * x[:, 0] + 0.5 * x[:, 1] ** 2
        np.testing.assert_allclose(energy, energy[0], rtol=1e-7, atol=1e-7)


class TestDwellTime:
    @pytest.fixture
    def uniform(self):
        return HybridTimeDomain(((0.0, 1.0, 0), (1.0, 2.0, 1), (2.0, 3.0, 2)))

    def test_measure_minimal(self, uniform):
        spec = measure_dwell_time(uniform, DwellKind.MINIMAL_AVERAGE, 1.0)
        assert spec.tau == pytest.approx(1.0)
        assert check_inter_jump_time(uniform, spec).holds
        assert not check_inter_jump_time(uniform, DwellTimeSpec(1.5, 1.0, DwellKind.MINIMAL_AVERAGE)).holds

    def test_measure_maximal(self, uniform):
        spec = measure_dwell_time(uniform, DwellKind.MAXIMAL_AVERAGE, 1.0)
        assert spec.tau == pytest.approx(1.0)
        assert check_inter_jump_time(uniform, spec).holds

    def test_no_jumps_has_infinite_minimal_dwell(self):
        domain = HybridTimeDomain(((0.0, 5.0, 0),))
        assert math.isinf(measure_dwell_time(domain, DwellKind.MINIMAL_AVERAGE, 1.0).tau)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_pairwise_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        lengths = rng.uniform(0.0, 2.0, int(rng.integers(1, 10)))
        lengths[rng.random(lengths.size) < 0.2] = 0.0
        starts = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
        domain = HybridTimeDomain(tuple((a, a + h, j) for j, (a, h) in enumerate(zip(starts, lengths))))
        kind = DwellKind.MINIMAL_AVERAGE if rng.random() < 0.5 else DwellKind.MAXIMAL_AVERAGE
        spec = DwellTimeSpec(tau=float(rng.uniform(0.2, 2.0)), N0=float(rng.uniform(0.0, 3.0)), kind=kind)

        points = [(t, j) for a, b, j in domain.intervals for t in np.linspace(a, b, 7)]
        worst = math.inf
        for s, i in points:
            for t, j in points:
                if t < s or j < i:
                    continue
                if kind == DwellKind.MINIMAL_AVERAGE:
                    margin = spec.N0 + (t - s) / spec.tau - (j - i)
                else:
                    margin = (j - i) - (t - s) / spec.tau + spec.N0
                worst = min(worst, margin)

        check = check_inter_jump_time(domain, spec)
        assert check.margin == pytest.approx(worst, abs=1e-9)
        if abs(worst) > 1e-9:
            assert check.holds == (worst >= 0)

    def test_domain_must_be_contiguous(self):
        with pytest.raises(InvalidDomain):
            HybridTimeDomain(((0.0, 1.0, 0), (1.5, 2.0, 1)))
        with pytest.raises(InvalidDomain):
            HybridTimeDomain(((0.0, 1.0, 0), (1.0, 2.0, 2)))


def test_sample_grid_includes_endpoints():
    grid = sample_grid(0.0, 0.0105, 1e-3)
    assert grid[0] == 0.0 and grid[-1] == 0.0105
    assert np.max(np.diff(grid)) <= 1e-3
