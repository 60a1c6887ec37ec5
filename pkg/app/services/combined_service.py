import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from app.config import ENUMERATION_DEPTH
from app.models.hybrid import (
    AffineHybridSystem,
    CombinedArc,
    CombinedJump,
    CombinedSegment,
    FlowSegment,
    HybridArc,
    HybridTimeDomain,
    InputFunction,
    JumpRecord,
    PiecewiseDense,
    check_state,
)
from app.models.schemas import Attribution, SimulationLimits, SimultaneousJumpPolicy, Termination
from app.services.hybrid_service import (
    EventSpec,
    FlowPiece,
    OutsideStateSpace,
    flow_until_event,
    guard_values,
    in_flow_set,
    in_jump_set,
    join_pieces,
    norm_event,
    project_onto_guard,
)

logger = logging.getLogger(__name__)

__all__ = [
    "CombinedServiceError",
    "AttributionAmbiguous",
    "ModeSwitching",
    "simulate_combined",
    "enumerate_combined",
    "reparameterize",
    "jump_mismatch",
]


class CombinedServiceError(Exception):
    """Base exception for combined-system simulation errors."""
    pass


class AttributionAmbiguous(CombinedServiceError):
    """Raised when both components are in D at once under the Strict policy."""

    def __init__(self, message: str, t: float):
        super().__init__(message)
        self.t = t


class ModeSwitching(Protocol):
    """Region-dependent input for the y component.

    switch_functions(mode) returns functions of (t, x, y) that are nonpositive
    while `mode` stays selected and cross zero upwards when it must change.
    """

    def classify(self, t: float, x: np.ndarray, y: np.ndarray) -> int: ...

    def switch_functions(self, mode: int) -> list[Callable[[float, np.ndarray, np.ndarray], float]]: ...

    def input(self, mode: int, t: float, x: np.ndarray, y: np.ndarray) -> float: ...


def _zero_input(t: float, x: np.ndarray) -> float:
    return 0.0


@dataclass
class _RunState:
    t: float
    j: int
    x: np.ndarray
    y: np.ndarray
    mode: Optional[int]
    armed_x: bool = True
    armed_y: bool = True
    jx: list[int] = field(default_factory=lambda: [0])
    jy: list[int] = field(default_factory=lambda: [0])
    last_jump: dict = field(default_factory=dict)
    simultaneous: int = 0


class _CombinedRun:
    """One deterministic combined simulation; `choices` orders simultaneous jumps."""

    def __init__(
        self,
        sys: AffineHybridSystem,
        x0: np.ndarray,
        y0: np.ndarray,
        t0: float,
        horizon: float,
        u_x: InputFunction,
        u_y: InputFunction,
        limits: SimulationLimits,
        policy: SimultaneousJumpPolicy,
        replay_x: Optional[HybridArc],
        modes: Optional[ModeSwitching],
        choices: tuple[str, ...] = (),
    ):
        self.sys = sys
        self.n = sys.n
        self.t_end = t0 + horizon
        self.u_x = u_x
        self.u_y = u_y
        self.limits = limits
        self.policy = policy
        self.replay = replay_x
        self.modes = modes
        self.choices = choices
        self.segments: list[CombinedSegment] = []
        self.jumps: list[CombinedJump] = []
        mode = modes.classify(t0, x0, y0) if modes is not None else None
        self.state = _RunState(t=t0, j=0, x=x0, y=y0, mode=mode)
        if replay_x is not None:
            self._reference = {segment.j: segment for segment in replay_x.segments}

    # State vector layout: [x; y] when integrating both, y alone when x is replayed.

    def _split(self, t: float, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.replay is None:
            return q[:self.n], q[self.n:]
        return self._reference_state(t), q

    def _reference_state(self, t: float) -> np.ndarray:
        return self._reference[self.state.jx[-1]].state_at(t)

    def _y_slice(self) -> slice:
        return slice(self.n, 2 * self.n) if self.replay is None else slice(0, self.n)

    def _pack(self) -> np.ndarray:
        if self.replay is None:
            return np.concatenate([self.state.x, self.state.y])
        return self.state.y.copy()

    def _t_stop(self) -> float:
        if self.replay is None:
            return self.t_end
        jx = self.state.jx[-1]
        stop = min(self.t_end, self._reference[jx].t_end)
        if jx < len(self.replay.jumps):
            stop = min(stop, self.replay.jumps[jx].t)
        return stop

    def _rhs(self, mode: Optional[int]):
        sys = self.sys

        def rhs(t, q):
            x, y = self._split(t, q)
            if self.modes is not None:
                u = self.modes.input(mode, t, x, y)
            else:
                u = self.u_y(t, y)
            dy = sys.A @ y + sys.E + sys.B * u
            if self.replay is not None:
                return dy
            dx = sys.A @ x + sys.E + sys.B * self.u_x(t, x)
            return np.concatenate([dx, dy])

        return rhs

    def _events(self) -> list[EventSpec]:
        sys, n, state = self.sys, self.n, self.state
        ys = self._y_slice()
        events = []
        components = [("y", ys, state.armed_y)]
        if self.replay is None:
            components.insert(0, ("x", slice(0, n), state.armed_x))
        for name, selector, armed in components:
            def g(t, q, selector=selector):
                return float(sys.J @ q[selector] + sys.K)
            if armed:
                events.append(EventSpec(f"guard_{name}", g, 1))
            else:
                events.append(EventSpec(f"rearm_{name}", g, -1))
            events.append(norm_event(f"escape_{name}", self.limits.escape_bound, selector, 1))
            if sys.exclusion_radius > 0:
                events.append(norm_event(f"exclusion_{name}", sys.exclusion_radius, selector, -1))
        if self.modes is not None:
            for k, function in enumerate(self.modes.switch_functions(state.mode)):
                def switch(t, q, function=function):
                    x, y = self._split(t, q)
                    return function(t, x, y)
                events.append(EventSpec(f"switch_{k}", switch, 1))
        return events

    def _inside_edge(self, x: np.ndarray) -> bool:
        _, h = guard_values(self.sys, x)
        return h <= -self.sys.jump_margin + self.limits.tol_event

    # Flow

    def _flow(self) -> tuple[Optional[str], set]:
        """Flow one interval; returns (termination event, components due to jump)."""
        state = self.state
        pieces: list[FlowPiece] = []
        regions: list[np.ndarray] = []
        stop = None
        due: set = set()
        t_stop = self._t_stop()

        while True:
            mode = state.mode
            piece = flow_until_event(self._rhs(mode), self._pack(), state.t, t_stop, self._events(), self.limits)
            pieces.append(piece)
            if self.modes is not None:
                regions.append(np.full(piece.t.size, mode))
            state.t = piece.t_end
            state.x, state.y = self._split(piece.t_end, piece.q_end)

            fired = piece.fired
            if fired is None:
                break
            kind, _, name = fired.partition("_")
            if kind in ("escape", "exclusion"):
                stop = kind
                break
            if kind == "switch":
                state.mode = self.modes.classify(state.t, state.x, state.y)
                continue
            if kind == "rearm":
                setattr(state, f"armed_{name}", True)
                continue
            component = state.x if name == "x" else state.y
            if self._inside_edge(component):
                due.add(name)
                break
            _, h = guard_values(self.sys, component)
            logger.warning(
                "Guard hyperplane of %s crossed outside the jump set at t=%.12g (h=%.3g); flow continues",
                name, state.t, h,
            )
            setattr(state, f"armed_{name}", False)

        self._append_segment(pieces, regions)
        if stop is None and self.replay is not None and state.t < self.t_end:
            jx = state.jx[-1]
            if jx < len(self.replay.jumps) and state.t >= self.replay.jumps[jx].t - self.limits.tol_event:
                due.add("x")
            elif state.t >= self._reference[jx].t_end:
                stop = "reference"
        return stop, due

    def _append_segment(self, pieces: list[FlowPiece], regions: list[np.ndarray]) -> None:
        times, states, dense = join_pieces(pieces)
        if self.replay is not None:
            reference = self._reference[self.state.jx[-1]]
            x = np.array([reference.state_at(t) for t in times])
            y = states
            y_dense = dense

            def dense(t, y_dense=y_dense, reference=reference):
                return np.concatenate([reference.state_at(t), y_dense(t)])
        else:
            x, y = states[:, :self.n], states[:, self.n:]
        region = None
        if self.modes is not None:
            region = np.concatenate([regions[0], *[r[1:] for r in regions[1:]]])
        segment = CombinedSegment(t=times, x=x, y=y, j=self.state.j, region=region, dense=dense)
        if self.segments and self.segments[-1].j == self.state.j:
            self.segments[-1] = _merge(self.segments[-1], segment)
        else:
            self.segments.append(segment)

    def _ensure_segment(self) -> None:
        state = self.state
        if not self.segments or self.segments[-1].j != state.j:
            region = None if state.mode is None else np.array([state.mode])
            self.segments.append(
                CombinedSegment(t=np.array([state.t]), x=state.x[None, :], y=state.y[None, :], j=state.j, region=region)
            )

    # Jumps

    def _due(self) -> set:
        state, tol = self.state, self.limits.tol_event
        due = set()
        if self.replay is not None:
            jx = state.jx[-1]
            if jx < len(self.replay.jumps) and self.replay.jumps[jx].t <= state.t + tol:
                due.add("x")
        elif in_jump_set(self.sys, state.x, tol):
            due.add("x")
        if in_jump_set(self.sys, state.y, tol):
            due.add("y")
        return due

    def _order(self, due: set) -> list[str]:
        if len(due) < 2:
            return sorted(due)
        state = self.state
        if self.policy == SimultaneousJumpPolicy.STRICT:
            raise AttributionAmbiguous(
                f"both components are in the jump set at t={state.t:.12g}", state.t
            )
        index = state.simultaneous
        state.simultaneous += 1
        first = self.choices[index] if index < len(self.choices) else "x"
        return [first, "y" if first == "x" else "x"]

    def _zeno(self, component: str) -> bool:
        state = self.state
        if len(self.jumps) >= self.limits.max_jumps:
            return True
        last = state.last_jump.get(component)
        return last is not None and state.t - last < self.limits.zeno_window

    def _jump(self, component: str, both: bool) -> None:
        sys, state = self.sys, self.state
        pre_x, pre_y = state.x.copy(), state.y.copy()
        if component == "x":
            if self.replay is not None:
                record = self.replay.jumps[state.jx[-1]]
                pre_x, post_x = record.pre.copy(), record.post.copy()
            else:
                pre_x = project_onto_guard(sys, state.x)
                post_x = sys.L @ pre_x + sys.H
            post_y = pre_y
            attribution = Attribution.X_JUMPED
        else:
            pre_y = project_onto_guard(sys, state.y)
            post_y = sys.L @ pre_y + sys.H
            post_x = pre_x
            attribution = Attribution.Y_JUMPED
        if both and self.policy == SimultaneousJumpPolicy.ENUMERATE_BOTH:
            attribution = Attribution.BOTH_ENUMERATED

        self.jumps.append(CombinedJump(
            t=state.t, j=state.j, attribution=attribution, component=component,
            pre_x=pre_x, pre_y=pre_y, post_x=post_x, post_y=post_y,
        ))
        state.last_jump[component] = state.t
        state.j += 1
        state.jx.append(state.jx[-1] + (component == "x"))
        state.jy.append(state.jy[-1] + (component == "y"))
        state.x, state.y = post_x, post_y
        setattr(state, f"armed_{component}", True)
        if self.modes is not None:
            state.mode = self.modes.classify(state.t, state.x, state.y)

    # Driver

    def run(self) -> CombinedArc:
        state = self.state
        termination = Termination.HORIZON_REACHED
        due = self._due()
        if due:
            logger.info("Initial combined state has %s in the jump set; jumping first", sorted(due))

        while True:
            if due:
                order = self._order(due)
                zeno = False
                for component in order:
                    self._ensure_segment()
                    if self._zeno(component):
                        zeno = True
                        break
                    self._jump(component, both=len(order) > 1)
                if zeno:
                    logger.warning("Zeno guard tripped at t=%.12g after %d jumps", state.t, len(self.jumps))
                    termination = Termination.ZENO_LIMIT
                    break
                due = self._due()
                continue

            if state.t >= self.t_end:
                self._ensure_segment()
                break

            stop, due = self._flow()
            if stop == "escape":
                logger.warning("Combined state norm exceeded %g at t=%.12g", self.limits.escape_bound, state.t)
                termination = Termination.ESCAPE_DETECTED
                break
            if stop == "exclusion":
                logger.warning("Combined trajectory left the flow set at t=%.12g", state.t)
                termination = Termination.LEFT_FLOW_SET
                break
            if stop == "reference":
                logger.warning("Reference arc ends at t=%.12g before the horizon", state.t)
                termination = self.replay.termination
                break
            if due or state.t < self.t_end:
                due |= self._due()

        if termination != Termination.HORIZON_REACHED:
            logger.warning(
                "Combined arc terminated early (%s) at t=%.12g; it does not represent both trajectories completely",
                termination.value, state.t,
            )
        domain = HybridTimeDomain(tuple((float(s.t[0]), float(s.t[-1]), s.j) for s in self.segments))
        return CombinedArc(
            domain=domain,
            segments=tuple(self.segments),
            jumps=tuple(self.jumps),
            jx=tuple(state.jx),
            jy=tuple(state.jy),
            termination=termination,
        )


def _merge(first: CombinedSegment, second: CombinedSegment) -> CombinedSegment:
    """Join a degenerate interval start with the flow that follows it."""
    dense = PiecewiseDense()
    for segment in (first, second):
        if segment.dense is not None:
            dense.add(float(segment.t[0]), float(segment.t[-1]), segment.dense)
    region = None
    if first.region is not None and second.region is not None:
        region = np.concatenate([first.region, second.region[1:]])
    return CombinedSegment(
        t=np.concatenate([first.t, second.t[1:]]),
        x=np.vstack([first.x, second.x[1:]]),
        y=np.vstack([first.y, second.y[1:]]),
        j=first.j,
        region=region,
        dense=dense if dense else None,
    )


def _prepare(sys, x0, y0, replay_x, limits):
    limits = limits or SimulationLimits()
    x0 = check_state("x0", x0, sys.n)
    y0 = check_state("y0", y0, sys.n)
    if replay_x is not None:
        x0 = replay_x.initial_state
    for name, state in (("x0", x0), ("y0", y0)):
        if not (in_flow_set(sys, state, limits.tol_event) or in_jump_set(sys, state, limits.tol_event)):
            raise OutsideStateSpace(f"{name} {state.tolist()} is outside C and D")
    return x0, y0, limits


def simulate_combined(
    sys: AffineHybridSystem,
    x0,
    y0,
    t0: float,
    horizon: float,
    u_x: Optional[InputFunction] = None,
    u_y: Optional[InputFunction] = None,
    limits: Optional[SimulationLimits] = None,
    policy: SimultaneousJumpPolicy = SimultaneousJumpPolicy.X_FIRST,
    replay_x: Optional[HybridArc] = None,
    modes: Optional[ModeSwitching] = None,
) -> CombinedArc:
    """Simulate x and y on one combined hybrid time domain.

    Each jump moves one component while the other stays frozen, and the shared
    counter j increases by one. With `replay_x` the x component is read from a
    precomputed arc instead of being integrated, and x jumps at its jump times.
    With `modes` the y input is `modes.input(region, t, x, y)` and region
    changes are located as events; they do not start new intervals.
    """
    x0, y0, limits = _prepare(sys, x0, y0, replay_x, limits)
    default = sys.flow_input or _zero_input
    run = _CombinedRun(
        sys, x0, y0, t0, horizon, u_x or default, u_y or default, limits, policy, replay_x, modes,
    )
    return run.run()


def enumerate_combined(
    sys: AffineHybridSystem,
    x0,
    y0,
    t0: float,
    horizon: float,
    u_x: Optional[InputFunction] = None,
    u_y: Optional[InputFunction] = None,
    limits: Optional[SimulationLimits] = None,
    depth: int = ENUMERATION_DEPTH,
    replay_x: Optional[HybridArc] = None,
    modes: Optional[ModeSwitching] = None,
) -> tuple[list[CombinedArc], bool]:
    """All combined arcs obtained by ordering simultaneous jumps either way.

    Branching stops after `depth` simultaneous instants; later ones follow the
    x-first order and `capped` is True.
    """
    x0, y0, limits = _prepare(sys, x0, y0, replay_x, limits)
    default = sys.flow_input or _zero_input
    arcs: list[CombinedArc] = []
    capped = False
    stack: list[tuple[str, ...]] = [()]
    while stack:
        prefix = stack.pop()
        run = _CombinedRun(
            sys, x0, y0, t0, horizon, u_x or default, u_y or default, limits,
            SimultaneousJumpPolicy.ENUMERATE_BOTH, replay_x, modes, choices=prefix,
        )
        arc = run.run()
        if run.state.simultaneous <= len(prefix):
            arcs.append(arc)
        elif len(prefix) >= depth:
            capped = True
            arcs.append(arc)
        else:
            stack.append(prefix + ("y",))
            stack.append(prefix + ("x",))
    if capped:
        logger.warning("Jump-order enumeration capped at depth %d; %d arcs returned", depth, len(arcs))
    return arcs, capped


# Reparameterization

def _component_dense(dense: Callable, selector: slice) -> Callable:
    def component(t):
        return np.asarray(dense(t))[selector]
    return component


def _collapse(combined: CombinedArc, component: str, counters: tuple[int, ...], n: int) -> HybridArc:
    selector = slice(0, n) if component == "x" else slice(n, 2 * n)
    groups: dict[int, list[CombinedSegment]] = {}
    for segment in combined.segments:
        groups.setdefault(counters[segment.j], []).append(segment)

    segments = []
    for k in sorted(groups):
        times, states = [], []
        dense = PiecewiseDense()
        for segment in groups[k]:
            values = segment.x if component == "x" else segment.y
            start = 1 if times and times[-1].size and times[-1][-1] == segment.t[0] else 0
            times.append(segment.t[start:])
            states.append(values[start:])
            if segment.dense is not None:
                dense.add(float(segment.t[0]), float(segment.t[-1]), _component_dense(segment.dense, selector))
        segments.append(FlowSegment(
            t=np.concatenate(times), x=np.vstack(states), j=k, dense=dense if dense else None,
        ))

    jumps = tuple(
        JumpRecord(
            t=jump.t,
            j=counters[jump.j],
            pre=jump.pre_x if component == "x" else jump.pre_y,
            post=jump.post_x if component == "x" else jump.post_y,
        )
        for jump in combined.jumps
        if jump.component == component
    )
    domain = HybridTimeDomain(tuple((s.t_start, s.t_end, s.j) for s in segments))
    return HybridArc(domain=domain, segments=tuple(segments), jumps=jumps, termination=combined.termination)


def reparameterize(combined: CombinedArc) -> tuple[HybridArc, HybridArc, tuple[int, ...], tuple[int, ...]]:
    """Recover the two original arcs by collapsing the combined counter through jx and jy."""
    n = combined.segments[0].x.shape[1]
    arc_x = _collapse(combined, "x", combined.jx, n)
    arc_y = _collapse(combined, "y", combined.jy, n)
    return arc_x, arc_y, combined.jx, combined.jy


def jump_mismatch(combined: CombinedArc) -> np.ndarray:
    """Rows (t_k^x, t_k^y, |t_k^x - t_k^y|) pairing the k-th jumps of each component."""
    tx = [jump.t for jump in combined.jumps if jump.component == "x"]
    ty = [jump.t for jump in combined.jumps if jump.component == "y"]
    m = min(len(tx), len(ty))
    rows = np.zeros((m, 3))
    if m:
        rows[:, 0] = tx[:m]
        rows[:, 1] = ty[:m]
        rows[:, 2] = np.abs(rows[:, 0] - rows[:, 1])
    return rows
