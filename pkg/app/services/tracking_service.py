import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Optional

import numpy as np

from app.config import HYSTERESIS, KBAR_MAX, TIE_BAND
from app.models.hybrid import (
    AffineHybridSystem,
    CombinedArc,
    ControllerDesign,
    HybridArc,
    LyapunovDesign,
    check_state,
)
from app.models.schemas import CertificateTolerances, RegionLabel, SimulationLimits, SimultaneousJumpPolicy
from app.services.combined_service import simulate_combined
from app.services.distance_service import Profile, distance_profile, euclidean_profile
from app.services.lyapunov_service import (
    REGIONS,
    SingularDesign,
    VMonitor,
    branch_values,
    classify,
    gbar,
    gbar_inverse,
    jump_matrix,
    monitor_V_along_arc,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TrackingServiceError",
    "OutOfHorizon",
    "InvalidController",
]


class TrackingServiceError(Exception):
    """Base exception for tracking controller errors."""
    pass


class OutOfHorizon(TrackingServiceError):
    """Raised when the reference is evaluated outside its time span."""
    pass


class InvalidController(TrackingServiceError):
    """Raised when the controller hypotheses do not hold."""
    pass


def make_controller(
    sys: AffineHybridSystem,
    design: LyapunovDesign,
    c0,
    c1,
    c2,
    u_ff: Callable[[float], float],
    reference: Optional[HybridArc] = None,
) -> ControllerDesign:
    """Build the switching controller, checking B != 0 and L + MJ invertible."""
    if not np.any(sys.B):
        raise InvalidController("input matrix B is zero")
    try:
        G = jump_matrix(sys, design)
    except SingularDesign as e:
        raise InvalidController(str(e)) from e
    beta2 = -G @ sys.B
    beta4 = -sys.B
    return ControllerDesign(c0=c0, c1=c1, c2=c2, beta2=beta2, beta4=beta4, u_ff=u_ff, reference=reference)


# Reference selection

@lru_cache(maxsize=32)
def _interval_ends(arc: HybridArc) -> np.ndarray:
    return np.array([segment.t_end for segment in arc.segments])


def reference_selector(arc: HybridArc, t: float, slack: float = 1e-12) -> np.ndarray:
    """State of the reference at time t on the interval with the smallest j."""
    t_start, t_end = arc.segments[0].t_start, arc.t_end
    if t < t_start - slack or t > t_end + slack:
        raise OutOfHorizon(f"t={t:.12g} is outside the reference span [{t_start:.12g}, {t_end:.12g}]")
    ends = _interval_ends(arc)
    index = min(int(np.searchsorted(ends, t, side="left")), len(arc.segments) - 1)
    segment = arc.segments[index]
    return segment.state_at(min(max(t, segment.t_start), segment.t_end))


def _reference_state(controller: ControllerDesign, t: float, x_ref) -> np.ndarray:
    if x_ref is not None:
        return np.asarray(x_ref, dtype=float)
    if controller.reference is None:
        raise InvalidController("controller has no reference arc")
    return reference_selector(controller.reference, t)


# Feedback law

def betas(
    sys: AffineHybridSystem,
    design: LyapunovDesign,
    controller: ControllerDesign,
    t: float,
    x_ref=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Drift mismatch terms beta1(t) (S1 case) and beta3(t) (S2 case)."""
    x = _reference_state(controller, t, x_ref)
    u_ff = float(controller.u_ff(t))
    G = jump_matrix(sys, design)

    def drift(z):
        return sys.A @ z + sys.B * u_ff + sys.E

    beta1 = drift(x) - G @ drift(gbar_inverse(sys, design, x))
    beta3 = G @ drift(x) - drift(gbar(sys, design, x))
    return beta1, beta3


def _off_span(vector: np.ndarray, direction: np.ndarray) -> float:
    return float(np.linalg.norm(vector - direction * (direction @ vector) / (direction @ direction)))


def span_condition_residual(
    sys: AffineHybridSystem,
    design: LyapunovDesign,
    controller: ControllerDesign,
    t_grid: Iterable[float],
) -> float:
    """Largest distance of beta1 from span(beta2) and of beta3 from span(beta4) over t_grid."""
    worst = 0.0
    for t in t_grid:
        beta1, beta3 = betas(sys, design, controller, float(t))
        worst = max(worst, _off_span(beta1, controller.beta2), _off_span(beta3, controller.beta4))
    return worst


def feedback(
    sys: AffineHybridSystem,
    design: LyapunovDesign,
    controller: ControllerDesign,
    t: float,
    y,
    x_ref=None,
    region: Optional[RegionLabel] = None,
) -> float:
    """Switching feedback u_fb(t, y); the region is classified when not given."""
    y = check_state("y", y, sys.n)
    x = _reference_state(controller, t, x_ref)
    if region is None:
        region = REGIONS[int(classify(branch_values(sys, design, x, y))[0])]

    if region == RegionLabel.S0:
        return float(-controller.c0 @ (x - y))
    beta1, beta3 = betas(sys, design, controller, t, x_ref=x)
    if region == RegionLabel.S1:
        beta2 = controller.beta2
        return float(-(beta2 @ beta1) / (beta2 @ beta2) + controller.c1 @ (x - gbar(sys, design, y)))
    beta4 = controller.beta4
    return float(-(beta4 @ beta3) / (beta4 @ beta4) - controller.c2 @ (gbar(sys, design, x) - y))


class RegionSwitching:
    """Region-dependent input u_ff + u_fb for the tracking component of a combined run."""

    def __init__(
        self,
        sys: AffineHybridSystem,
        design: LyapunovDesign,
        controller: ControllerDesign,
        hysteresis: float = HYSTERESIS,
        tie_band: float = TIE_BAND,
    ):
        self.sys = sys
        self.design = design
        self.controller = controller
        self.hysteresis = hysteresis
        self.tie_band = tie_band

    def _values(self, x, y) -> np.ndarray:
        return branch_values(self.sys, self.design, x, y)[0]

    def classify(self, t: float, x: np.ndarray, y: np.ndarray) -> int:
        return int(classify(self._values(x, y), self.tie_band)[0])

    def switch_functions(self, mode: int) -> list[Callable[[float, np.ndarray, np.ndarray], float]]:
        def crossing(other):
            def function(t, x, y):
                values = self._values(x, y)
                return float(values[mode] - values[other] - self.hysteresis)
            return function
        return [crossing(other) for other in range(len(REGIONS)) if other != mode]

    def input(self, mode: int, t: float, x: np.ndarray, y: np.ndarray) -> float:
        u_fb = feedback(self.sys, self.design, self.controller, t, y, x_ref=x, region=REGIONS[mode])
        return float(self.controller.u_ff(t)) + u_fb


# Closed loop

@dataclass(frozen=True)
class ControlProfile:
    t: np.ndarray
    j: np.ndarray
    values: np.ndarray
    regions: np.ndarray


@dataclass(frozen=True)
class TrackingRun:
    combined: CombinedArc
    distance: Profile
    euclidean: Profile
    monitor: VMonitor
    control: ControlProfile


def control_profile(
    sys: AffineHybridSystem,
    design: LyapunovDesign,
    controller: ControllerDesign,
    combined: CombinedArc,
) -> ControlProfile:
    """u_fb along a combined arc, using the region held by the simulation at each sample."""
    t, j, x, y = combined.samples()
    held = combined.regions()
    if held is None:
        held = classify(branch_values(sys, design, x, y))
    values = np.array([
        feedback(sys, design, controller, tk, yk, x_ref=xk, region=REGIONS[int(rk)])
        for tk, xk, yk, rk in zip(t, x, y, held)
    ])
    if controller.reference is not None:
        selected = np.array([
            reference_selector(controller.reference, tk) if tk <= controller.reference.t_end else xk
            for tk, xk in zip(t, x)
        ])
        disagree = int(np.sum(classify(branch_values(sys, design, selected, y)) != held))
        if disagree:
            logger.debug("Region from the min-j reference differs from the held region at %d samples", disagree)
    return ControlProfile(t=t, j=j, values=values, regions=np.asarray(held, dtype=int))


def closed_loop_simulate(
    sys: AffineHybridSystem,
    design: LyapunovDesign,
    controller: ControllerDesign,
    y0,
    t0: float,
    horizon: float,
    limits: Optional[SimulationLimits] = None,
    tolerances: Optional[CertificateTolerances] = None,
    policy: SimultaneousJumpPolicy = SimultaneousJumpPolicy.X_FIRST,
    kbar_max: int = KBAR_MAX,
) -> TrackingRun:
    """Track the stored reference arc from y0 under u_ff + u_fb."""
    if controller.reference is None:
        raise InvalidController("closed-loop simulation needs a reference arc")
    reference = controller.reference
    tolerances = tolerances or CertificateTolerances()
    modes = RegionSwitching(sys, design, controller, tolerances.hysteresis, tolerances.tie_band)

    combined = simulate_combined(
        sys,
        reference.initial_state,
        y0,
        t0,
        horizon,
        limits=limits,
        policy=policy,
        replay_x=reference,
        modes=modes,
    )
    logger.info(
        "Closed loop: %d combined jumps (%d reference, %d tracking), termination %s",
        len(combined.jumps), combined.jx[-1], combined.jy[-1], combined.termination.value,
    )
    return TrackingRun(
        combined=combined,
        distance=distance_profile(sys, combined, kbar_max),
        euclidean=euclidean_profile(combined),
        monitor=monitor_V_along_arc(combined, sys, design, tolerances),
        control=control_profile(sys, design, controller, combined),
    )
