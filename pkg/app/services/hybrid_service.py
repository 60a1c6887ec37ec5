import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from app.config import INTEGRATOR_METHOD, TOL_EVENT
from app.models.hybrid import (
    AffineHybridSystem,
    DwellTimeSpec,
    FlowSegment,
    HybridArc,
    HybridTimeDomain,
    InputFunction,
    InvalidDimension,
    JumpRecord,
    PiecewiseDense,
    check_state,
)
from app.models.schemas import DwellCheck, DwellKind, SimulationLimits, Termination

logger = logging.getLogger(__name__)

__all__ = [
    "HybridServiceError",
    "InvalidDimension",
    "OutsideStateSpace",
    "NotInJumpSet",
    "EscapeDetected",
    "IntegratorStall",
    "ZenoLimit",
    "EmptyDomain",
    "DwellInfeasible",
]


class HybridServiceError(Exception):
    """Base exception for hybrid simulation errors."""
    pass


class OutsideStateSpace(HybridServiceError):
    """Raised when a state lies outside C union D."""
    pass


class NotInJumpSet(HybridServiceError):
    """Raised when a jump is requested away from D."""
    pass


class EscapeDetected(HybridServiceError):
    """Raised when the state norm exceeds the escape bound."""

    def __init__(self, message: str, t: float, segment: Optional[FlowSegment] = None):
        super().__init__(message)
        self.t = t
        self.segment = segment


class IntegratorStall(HybridServiceError):
    """Raised when the integrator cannot advance."""
    pass


class ZenoLimit(HybridServiceError):
    """Raised when jumps accumulate faster than the Zeno guard allows."""
    pass


class EmptyDomain(HybridServiceError):
    """Raised when a dwell-time check receives no intervals."""
    pass


class DwellInfeasible(HybridServiceError):
    """Raised when no positive average inter-jump time fits a domain."""
    pass


def _zero_input(t: float, x: np.ndarray) -> float:
    return 0.0


# Guard geometry

def guard_values(sys: AffineHybridSystem, x) -> tuple[float, float]:
    """Return g = Jx + K and h = z1 x + z2."""
    x = check_state("x", x, sys.n)
    return float(sys.J @ x + sys.K), float(sys.z1 @ x + sys.z2)


def flow_facets(sys: AffineHybridSystem, x: np.ndarray) -> tuple[float, float]:
    """Values of the two half-spaces whose intersection is C (before the ball exclusion)."""
    g = float(sys.J @ x + sys.K)
    c = float(sys.s * (sys.J_Linv @ x + sys.K - sys.J_Linv @ sys.H))
    return g, c


def in_flow_set(sys: AffineHybridSystem, x, tol: float = TOL_EVENT) -> bool:
    x = check_state("x", x, sys.n)
    g, c = flow_facets(sys, x)
    if g > tol or c > tol:
        return False
    return sys.exclusion_radius == 0 or float(np.linalg.norm(x)) >= sys.exclusion_radius - tol


def in_jump_set(sys: AffineHybridSystem, x, tol: float = TOL_EVENT) -> bool:
    g, h = guard_values(sys, x)
    return abs(g) <= tol and h <= -sys.jump_margin + tol and in_flow_set(sys, x, tol)


def project_onto_guard(sys: AffineHybridSystem, x: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto the hyperplane Jx + K = 0."""
    return x - sys.J * (sys.J @ x + sys.K) / (sys.J @ sys.J)


def apply_jump(sys: AffineHybridSystem, x, tol: float = TOL_EVENT) -> np.ndarray:
    x = check_state("x", x, sys.n)
    if not in_jump_set(sys, x, tol):
        g, h = guard_values(sys, x)
        raise NotInJumpSet(f"state {x.tolist()} is not in D (g={g:.3g}, h={h:.3g})")
    return sys.L @ x + sys.H


# Event-located integration

@dataclass(frozen=True)
class EventSpec:
    """Terminal event; direction +1 fires on upward zero crossings."""
    name: str
    function: Callable[[float, np.ndarray], float]
    direction: int


@dataclass(frozen=True)
class FlowPiece:
    t: np.ndarray
    q: np.ndarray
    dense: Callable
    t_end: float
    q_end: np.ndarray
    fired: Optional[str]


def sample_grid(t_start: float, t_end: float, sample_dt: float) -> np.ndarray:
    """Uniform grid with both endpoints and spacing at most sample_dt."""
    if t_end <= t_start:
        return np.array([t_start])
    count = max(int(np.ceil((t_end - t_start) / sample_dt - 1e-9)), 1)
    grid = np.linspace(t_start, t_end, count + 1)
    grid[-1] = t_end
    return grid


def _ivp_event(spec: EventSpec):
    def event(t, q):
        return spec.function(t, q)
    event.terminal = True
    event.direction = spec.direction
    return event


def flow_until_event(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    q0: np.ndarray,
    t0: float,
    t_max: float,
    events: list[EventSpec],
    limits: SimulationLimits,
) -> FlowPiece:
    """Integrate until t_max or the first terminal event."""
    q0 = np.asarray(q0, dtype=float)
    if t_max <= t0:
        constant = q0.copy()
        return FlowPiece(np.array([t0]), q0[None, :], lambda t: constant, t0, q0, None)

    sol = solve_ivp(
        rhs,
        (t0, t_max),
        q0,
        method=INTEGRATOR_METHOD,
        rtol=limits.rtol,
        atol=limits.atol,
        dense_output=True,
        events=[_ivp_event(spec) for spec in events] or None,
    )
    if sol.status == -1:
        raise IntegratorStall(f"integration failed at t={sol.t[-1]:.17g}: {sol.message}")

    fired = None
    t_end = float(sol.t[-1])
    q_end = sol.y[:, -1].copy()
    if sol.status == 1:
        candidates = [
            (float(times[0]), k)
            for k, times in enumerate(sol.t_events)
            if len(times)
        ]
        t_event, k = min(candidates)
        fired = events[k].name
        t_end = t_event
        q_end = sol.y_events[k][0].copy()

    grid = sample_grid(t0, t_end, limits.sample_dt)
    q = sol.sol(grid).T
    q[0] = q0
    q[-1] = q_end
    return FlowPiece(grid, q, sol.sol, t_end, q_end, fired)


def join_pieces(pieces: list[FlowPiece]) -> tuple[np.ndarray, np.ndarray, PiecewiseDense]:
    """Concatenate consecutive pieces, dropping the repeated joint samples."""
    dense = PiecewiseDense()
    times = [pieces[0].t]
    states = [pieces[0].q]
    dense.add(float(pieces[0].t[0]), pieces[0].t_end, pieces[0].dense)
    for piece in pieces[1:]:
        times.append(piece.t[1:])
        states.append(piece.q[1:])
        dense.add(float(piece.t[0]), piece.t_end, piece.dense)
    return np.concatenate(times), np.vstack(states), dense


def norm_event(name: str, bound: float, selector: slice, direction: int) -> EventSpec:
    return EventSpec(name, lambda t, q: float(np.linalg.norm(q[selector])) - bound, direction)


def guard_event(name: str, sys: AffineHybridSystem, selector: slice, direction: int = 1) -> EventSpec:
    return EventSpec(name, lambda t, q: float(sys.J @ q[selector] + sys.K), direction)


class FlowStop(str, Enum):
    HORIZON = "horizon"
    GUARD = "guard"
    LEFT_FLOW_SET = "left_flow_set"


@dataclass(frozen=True)
class FlowResult:
    segment: FlowSegment
    stop: FlowStop
    event_time: Optional[float] = None
    event_state: Optional[np.ndarray] = None


def integrate_flow(
    sys: AffineHybridSystem,
    x0,
    t0: float,
    t_max: float,
    u: Optional[InputFunction] = None,
    limits: Optional[SimulationLimits] = None,
    j: int = 0,
) -> FlowResult:
    """Flow from x0 until t_max or a guard crossing inside D.

    Crossings of the guard hyperplane outside D do not stop the flow; the
    guard is re-armed once the state returns to the C side.
    """
    limits = limits or SimulationLimits()
    x0 = check_state("x0", x0, sys.n)
    u = u or sys.flow_input or _zero_input
    everything = slice(0, sys.n)

    def rhs(t, x):
        return sys.A @ x + sys.E + sys.B * u(t, x)

    boundary = [norm_event("escape", limits.escape_bound, everything, 1)]
    if sys.exclusion_radius > 0:
        boundary.append(norm_event("exclusion", sys.exclusion_radius, everything, -1))

    pieces: list[FlowPiece] = []
    armed = True
    t, x = t0, x0
    while True:
        trigger = guard_event("guard", sys, everything, 1) if armed else guard_event("rearm", sys, everything, -1)
        piece = flow_until_event(rhs, x, t, t_max, [trigger, *boundary], limits)
        pieces.append(piece)

        if piece.fired in (None, "escape", "exclusion") or (piece.fired == "guard" and _inside_edge(sys, piece.q_end, limits)):
            break
        if piece.fired == "guard":
            _, h = guard_values(sys, piece.q_end)
            logger.warning(
                "Guard hyperplane crossed outside the jump set at t=%.12g (h=%.3g); flow continues",
                piece.t_end, h,
            )
        armed = piece.fired == "rearm"
        t, x = piece.t_end, piece.q_end

    times, states, dense = join_pieces(pieces)
    segment = FlowSegment(t=times, x=states, j=j, dense=dense)
    last = pieces[-1]

    if last.fired == "escape":
        raise EscapeDetected(
            f"state norm exceeded {limits.escape_bound:g} at t={last.t_end:.12g}",
            last.t_end,
            segment,
        )
    if last.fired == "exclusion":
        return FlowResult(segment, FlowStop.LEFT_FLOW_SET, last.t_end, last.q_end)
    if last.fired == "guard":
        return FlowResult(segment, FlowStop.GUARD, last.t_end, project_onto_guard(sys, last.q_end))
    return FlowResult(segment, FlowStop.HORIZON)


def _inside_edge(sys: AffineHybridSystem, x: np.ndarray, limits: SimulationLimits) -> bool:
    _, h = guard_values(sys, x)
    return h <= -sys.jump_margin + limits.tol_event


# Solutions

def simulate(
    sys: AffineHybridSystem,
    x0,
    t0: float,
    horizon: float,
    u: Optional[InputFunction] = None,
    limits: Optional[SimulationLimits] = None,
) -> HybridArc:
    """Alternate flow and jumps until the horizon or a termination condition."""
    limits = limits or SimulationLimits()
    x = check_state("x0", x0, sys.n)
    tol = limits.tol_event
    if not (in_flow_set(sys, x, tol) or in_jump_set(sys, x, tol)):
        raise OutsideStateSpace(f"initial state {x.tolist()} is outside C and D")

    t_end = t0 + horizon
    t, j = t0, 0
    segments: list[FlowSegment] = []
    jumps: list[JumpRecord] = []
    termination = Termination.HORIZON_REACHED

    pending_jump = in_jump_set(sys, x, tol)
    if pending_jump:
        logger.info("Initial state %s lies in the jump set; jumping first", x.tolist())

    while True:
        if pending_jump:
            if not segments or segments[-1].j != j:
                segments.append(FlowSegment(t=np.array([t]), x=x[None, :], j=j))
            if len(jumps) >= limits.max_jumps or (jumps and t - jumps[-1].t < limits.zeno_window):
                logger.warning("Zeno guard tripped at t=%.12g after %d jumps", t, len(jumps))
                termination = Termination.ZENO_LIMIT
                break
            pre = project_onto_guard(sys, x)
            post = sys.L @ pre + sys.H
            jumps.append(JumpRecord(t=t, j=j, pre=pre, post=post))
            j += 1
            x = post
            pending_jump = in_jump_set(sys, x, tol)
            if not pending_jump and t >= t_end:
                segments.append(FlowSegment(t=np.array([t]), x=x[None, :], j=j))
                break
            continue

        if t >= t_end:
            if not segments or segments[-1].j != j:
                segments.append(FlowSegment(t=np.array([t]), x=x[None, :], j=j))
            break

        try:
            result = integrate_flow(sys, x, t, t_end, u, limits, j=j)
        except EscapeDetected as exc:
            logger.warning("Simulation escaped: %s", exc)
            segments.append(exc.segment)
            termination = Termination.ESCAPE_DETECTED
            break

        segments.append(result.segment)
        if result.stop == FlowStop.HORIZON:
            break
        if result.stop == FlowStop.LEFT_FLOW_SET:
            logger.warning("Trajectory left the flow set at t=%.12g", result.event_time)
            termination = Termination.LEFT_FLOW_SET
            break
        t, x = result.event_time, result.event_state
        pending_jump = True

    domain = HybridTimeDomain(tuple((s.t_start, s.t_end, s.j) for s in segments))
    return HybridArc(domain=domain, segments=tuple(segments), jumps=tuple(jumps), termination=termination)


def flow_residual(sys: AffineHybridSystem, segment: FlowSegment, u: Optional[InputFunction] = None) -> float:
    """Largest central-difference residual of the flow ODE, scaled by 1 + |x|."""
    if segment.t.size < 3:
        return 0.0
    u = u or sys.flow_input or _zero_input
    t, x = segment.t, segment.x
    derivative = (x[2:] - x[:-2]) / (t[2:] - t[:-2])[:, None]
    inputs = np.array([u(tk, xk) for tk, xk in zip(t[1:-1], x[1:-1])])
    vector_field = x[1:-1] @ sys.A.T + sys.E + np.outer(inputs, sys.B)
    scale = 1.0 + np.linalg.norm(x[1:-1], axis=1)
    return float(np.max(np.linalg.norm(derivative - vector_field, axis=1) / scale))


def validate_arc(
    sys: AffineHybridSystem,
    arc: HybridArc,
    u: Optional[InputFunction] = None,
    limits: Optional[SimulationLimits] = None,
    residual_tol: float = 1e-4,
) -> list[str]:
    """Return a list of violated arc invariants; empty when the arc is sound."""
    limits = limits or SimulationLimits()
    issues = []
    for jump in arc.jumps:
        g, h = guard_values(sys, jump.pre)
        if abs(g) > limits.tol_event or h > -sys.jump_margin + limits.tol_event:
            issues.append(f"jump {jump.j} at t={jump.t:.12g}: pre-state not in D (g={g:.3g}, h={h:.3g})")
        expected = sys.L @ jump.pre + sys.H
        if np.linalg.norm(jump.post - expected) > 1e-10 * max(1.0, np.linalg.norm(expected)):
            issues.append(f"jump {jump.j} at t={jump.t:.12g}: post-state is not L pre + H")
    for segment in arc.segments:
        residual = flow_residual(sys, segment, u)
        if residual > residual_tol:
            issues.append(f"interval {segment.j}: flow residual {residual:.3g}")
    return issues


# Dwell-time analytics

def _endpoint_pairs(domain: HybridTimeDomain) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if not domain.intervals:
        raise EmptyDomain("domain has no intervals")
    points = np.array(domain.endpoints(), dtype=float)
    t, j = points[:, 0], points[:, 1]
    elapsed = t[None, :] - t[:, None]
    jumps = j[None, :] - j[:, None]
    ordered = (t[None, :] + j[None, :]) >= (t[:, None] + j[:, None])
    return points, elapsed, jumps, ordered


def check_inter_jump_time(domain: HybridTimeDomain, spec: DwellTimeSpec) -> DwellCheck:
    """Check the average inter-jump inequality over all ordered endpoint pairs."""
    points, elapsed, jumps, ordered = _endpoint_pairs(domain)
    if spec.kind == DwellKind.MINIMAL_AVERAGE:
        margin = spec.N0 + elapsed / spec.tau - jumps
    else:
        margin = jumps - elapsed / spec.tau + spec.N0
    margin = np.where(ordered, margin, np.inf)

    a, b = np.unravel_index(int(np.argmin(margin)), margin.shape)
    worst = float(margin[a, b])
    return DwellCheck(
        holds=worst >= 0,
        worst_pair=((float(points[a, 0]), int(points[a, 1])), (float(points[b, 0]), int(points[b, 1]))),
        margin=worst,
    )


def measure_dwell_time(domain: HybridTimeDomain, kind: DwellKind, N0: float) -> DwellTimeSpec:
    """Tightest average inter-jump time of the given kind for offset N0."""
    _, elapsed, jumps, ordered = _endpoint_pairs(domain)
    if kind == DwellKind.MINIMAL_AVERAGE:
        binding = ordered & (jumps > N0)
        if not np.any(binding):
            return DwellTimeSpec(tau=float("inf"), N0=N0, kind=kind)
        tau = float(np.min(elapsed[binding] / (jumps[binding] - N0)))
    else:
        tau = float(np.max(np.where(ordered, elapsed / (jumps + N0), 0.0)))
    if not tau > 0:
        raise DwellInfeasible(f"no positive {kind.value} inter-jump time fits with N0={N0}")
    return DwellTimeSpec(tau=tau, N0=N0, kind=kind)
