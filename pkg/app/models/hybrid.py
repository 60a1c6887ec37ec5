"""Numerical domain types: affine hybrid systems, hybrid time domains and arcs,
Lyapunov and controller designs.

All types are frozen dataclasses over numpy arrays. Arrays are copied and
made read-only on construction so arcs and designs can be shared between
threads without copying.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.linalg import svdvals

from app.models.schemas import (
    Attribution,
    CertificateTolerances,
    DwellConfig,
    DwellKind,
    Feedforward,
    SimulationLimits,
    SimultaneousJumpPolicy,
    StabilityCase,
    Termination,
)


class HybridModelError(ValueError):
    """Base exception for malformed model data."""
    pass


class InvalidDimension(HybridModelError):
    """Raised when array shapes do not agree with the state dimension."""
    pass


class InvalidSystem(HybridModelError):
    """Raised when system data violates a structural requirement."""
    pass


class InvalidDomain(HybridModelError):
    """Raised when intervals do not form a hybrid time domain."""
    pass


class InvalidParameter(HybridModelError):
    """Raised when a scalar parameter is out of range."""
    pass


InputFunction = Callable[[float, np.ndarray], float]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def _matrix(name: str, value, n: Optional[int] = None) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(value, dtype=float))
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise InvalidDimension(f"{name}: expected a square matrix, got shape {matrix.shape}")
    if n is not None and matrix.shape[0] != n:
        raise InvalidDimension(f"{name}: expected {n}x{n}, got {matrix.shape}")
    return _frozen(matrix)


def _vector(name: str, value, n: int) -> np.ndarray:
    vector = np.asarray(value, dtype=float).reshape(-1)
    if vector.shape != (n,):
        raise InvalidDimension(f"{name}: expected length {n}, got {vector.size}")
    return _frozen(vector)


def check_state(name: str, x, n: int) -> np.ndarray:
    """Coerce a state to a float n-vector or raise InvalidDimension."""
    state = np.asarray(x, dtype=float)
    if state.shape != (n,):
        raise InvalidDimension(f"{name}: expected a state of length {n}, got shape {np.shape(x)}")
    return state


@dataclass(frozen=True, eq=False)
class AffineHybridSystem:
    """Flow x' = Ax + E + Bu on C, jump x+ = Lx + H on D.

    D = {x in C : Jx + K = 0, z1 x + z2 <= -jump_margin}. C is the implicit
    set Jx + K <= 0, s(J L^-1 x + K - J L^-1 H) <= 0, minus the open ball of
    radius exclusion_radius around the origin.
    """
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    L: np.ndarray
    H: np.ndarray
    J: np.ndarray
    K: float
    z1: np.ndarray
    z2: float
    s: int
    exclusion_radius: float = 0.0
    jump_margin: float = 0.0
    flow_input: Optional[InputFunction] = None
    name: str = ""

    def __post_init__(self):
        A = _matrix("A", self.A)
        n = A.shape[0]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "L", _matrix("L", self.L, n))
        for key in ("B", "E", "H", "J", "z1"):
            object.__setattr__(self, key, _vector(key, getattr(self, key), n))
        object.__setattr__(self, "K", float(self.K))
        object.__setattr__(self, "z2", float(self.z2))

        singular_values = svdvals(self.L)
        if singular_values[-1] < 1e-12 * singular_values[0]:
            raise InvalidSystem("L must be invertible")
        if not np.any(self.J):
            raise InvalidSystem("J must be nonzero")
        if not np.any(self.z1):
            raise InvalidSystem("z1 must be nonzero")
        if self.s not in (-1, 1):
            raise InvalidSystem(f"s must be -1 or +1, got {self.s}")
        if self.exclusion_radius < 0 or self.jump_margin < 0:
            raise InvalidParameter("exclusion_radius and jump_margin must be nonnegative")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @cached_property
    def L_inv(self) -> np.ndarray:
        return _frozen(np.linalg.inv(self.L))

    @cached_property
    def J_Linv(self) -> np.ndarray:
        return _frozen(self.J @ self.L_inv)

    @cached_property
    def n_gd(self) -> np.ndarray:
        """Outward normal of C on G(D): s (L^-1)^T J^T."""
        return _frozen(self.s * self.L_inv.T @ self.J)

    def flow(self, t: float, x: np.ndarray, u: float = 0.0) -> np.ndarray:
        return self.A @ x + self.E + self.B * u


@dataclass(frozen=True)
class GuardGeometry:
    """Separation constants of the guard: G(D) sits z3 above the D edge,
    C near the edge keeps z4 away from the guard hyperplane, and the guard
    rises at slope z5 towards D."""
    z3: float
    z4: float
    z5: float

    def __post_init__(self):
        if min(self.z3, self.z4, self.z5) <= 0:
            raise InvalidParameter(f"z3, z4, z5 must be positive, got {self.z3}, {self.z4}, {self.z5}")


@dataclass(frozen=True)
class HybridTimeDomain:
    """Ordered intervals (t_j, t_{j+1}, j)."""
    intervals: tuple[tuple[float, float, int], ...]

    def __post_init__(self):
        intervals = tuple((float(a), float(b), int(j)) for a, b, j in self.intervals)
        object.__setattr__(self, "intervals", intervals)
        for k, (t_start, t_end, j) in enumerate(intervals):
            if t_end < t_start:
                raise InvalidDomain(f"interval {j} runs backwards: [{t_start}, {t_end}]")
            if k == 0:
                continue
            previous_end, previous_j = intervals[k - 1][1], intervals[k - 1][2]
            if j != previous_j + 1:
                raise InvalidDomain(f"jump counter skips from {previous_j} to {j}")
            if t_start != previous_end:
                raise InvalidDomain(f"interval {j} starts at {t_start}, previous ended at {previous_end}")

    def __len__(self) -> int:
        return len(self.intervals)

    @property
    def jump_count(self) -> int:
        return max(len(self.intervals) - 1, 0)

    @property
    def jump_times(self) -> np.ndarray:
        return np.array([start for start, _, _ in self.intervals[1:]])

    def endpoints(self) -> list[tuple[float, int]]:
        points = []
        for t_start, t_end, j in self.intervals:
            points.append((t_start, j))
            points.append((t_end, j))
        return points


class PiecewiseDense:
    """Dense interpolant glued from consecutive pieces over one flow interval."""

    def __init__(self):
        self._starts: list[float] = []
        self._ends: list[float] = []
        self._pieces: list[Callable] = []

    def add(self, t_start: float, t_end: float, piece: Callable) -> None:
        self._starts.append(t_start)
        self._ends.append(t_end)
        self._pieces.append(piece)

    def __bool__(self) -> bool:
        return bool(self._pieces)

    def __call__(self, t: float) -> np.ndarray:
        index = int(np.searchsorted(self._ends, t, side="left"))
        index = min(index, len(self._pieces) - 1)
        return np.asarray(self._pieces[index](t), dtype=float)


@dataclass(frozen=True, eq=False)
class FlowSegment:
    """Samples of one flow interval; t is nondecreasing and x has one row per sample."""
    t: np.ndarray
    x: np.ndarray
    j: int
    dense: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, "t", _frozen(self.t))
        object.__setattr__(self, "x", _frozen(np.atleast_2d(self.x)))

    @property
    def t_start(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def state_at(self, t: float) -> np.ndarray:
        if self.dense is not None:
            return self.dense(t)
        return np.array([np.interp(t, self.t, column) for column in self.x.T])


@dataclass(frozen=True, eq=False)
class JumpRecord:
    t: float
    j: int
    pre: np.ndarray
    post: np.ndarray


@dataclass(frozen=True, eq=False)
class HybridArc:
    domain: HybridTimeDomain
    segments: tuple[FlowSegment, ...]
    jumps: tuple[JumpRecord, ...]
    termination: Termination

    @property
    def initial_state(self) -> np.ndarray:
        return self.segments[0].x[0].copy()

    @property
    def final_state(self) -> np.ndarray:
        return self.segments[-1].x[-1].copy()

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    def samples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (t, j, x) over all intervals; jump instants appear twice."""
        t = np.concatenate([segment.t for segment in self.segments])
        j = np.concatenate([np.full(segment.t.size, segment.j) for segment in self.segments])
        x = np.vstack([segment.x for segment in self.segments])
        return t, j, x


@dataclass(frozen=True, eq=False)
class CombinedSegment:
    """One interval of the combined arc; region holds the label used for control, if any."""
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    j: int
    region: Optional[np.ndarray] = None
    dense: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, "t", _frozen(self.t))
        object.__setattr__(self, "x", _frozen(np.atleast_2d(self.x)))
        object.__setattr__(self, "y", _frozen(np.atleast_2d(self.y)))
        if self.region is not None:
            region = np.array(self.region, dtype=int)
            region.setflags(write=False)
            object.__setattr__(self, "region", region)


@dataclass(frozen=True, eq=False)
class CombinedJump:
    t: float
    j: int
    attribution: Attribution
    component: str  # "x" or "y"
    pre_x: np.ndarray
    pre_y: np.ndarray
    post_x: np.ndarray
    post_y: np.ndarray


@dataclass(frozen=True, eq=False)
class CombinedArc:
    domain: HybridTimeDomain
    segments: tuple[CombinedSegment, ...]
    jumps: tuple[CombinedJump, ...]
    jx: tuple[int, ...]
    jy: tuple[int, ...]
    termination: Termination

    def samples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        t = np.concatenate([segment.t for segment in self.segments])
        j = np.concatenate([np.full(segment.t.size, segment.j) for segment in self.segments])
        x = np.vstack([segment.x for segment in self.segments])
        y = np.vstack([segment.y for segment in self.segments])
        return t, j, x, y

    def regions(self) -> Optional[np.ndarray]:
        if any(segment.region is None for segment in self.segments):
            return None
        return np.concatenate([segment.region for segment in self.segments])


@dataclass(frozen=True)
class DwellTimeSpec:
    tau: float
    N0: float
    kind: DwellKind

    def __post_init__(self):
        if self.tau <= 0 or self.N0 <= 0:
            raise InvalidParameter(f"tau and N0 must be positive, got {self.tau}, {self.N0}")


@dataclass(frozen=True)
class DerivedConstants:
    delta1: float
    vL: float
    lambda_lo: float
    lambda_hi: float
    LV: float
    sigma: float
    ell_g: float


@dataclass(frozen=True, eq=False)
class LyapunovDesign:
    P0: np.ndarray
    Ps: np.ndarray
    M: np.ndarray
    lambda_c: float
    lambda_d: float
    derived: Optional[DerivedConstants] = None

    def __post_init__(self):
        P0 = _matrix("P0", self.P0)
        n = P0.shape[0]
        Ps = _matrix("Ps", self.Ps, n)
        object.__setattr__(self, "P0", P0)
        object.__setattr__(self, "Ps", Ps)
        object.__setattr__(self, "M", _vector("M", self.M, n))
        for name, P in (("P0", P0), ("Ps", Ps)):
            if np.max(np.abs(P - P.T)) > 1e-12 * max(1.0, np.max(np.abs(P))):
                raise InvalidParameter(f"{name} must be symmetric")
            if np.linalg.eigvalsh(P)[0] <= 0:
                raise InvalidParameter(f"{name} must be positive definite")

    @property
    def n(self) -> int:
        return self.P0.shape[0]


@dataclass(frozen=True, eq=False)
class ControllerDesign:
    """Switching feedback gains; beta2 = -(L+MJ)B and beta4 = -B."""
    c0: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    beta2: np.ndarray
    beta4: np.ndarray
    u_ff: Callable[[float], float]
    reference: Optional[HybridArc] = None

    def __post_init__(self):
        n = np.asarray(self.beta2).size
        for key in ("c0", "c1", "c2", "beta2", "beta4"):
            object.__setattr__(self, key, _vector(key, getattr(self, key), n))


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    system: AffineHybridSystem
    design: LyapunovDesign
    controller: Optional[ControllerDesign]
    geometry: GuardGeometry
    feedforward: Feedforward
    reference_x0: np.ndarray
    tracking_y0: Optional[np.ndarray]
    neighbor_x0: Optional[np.ndarray]
    t0: float
    horizon: float
    dwell: Optional[DwellTimeSpec]
    limits: SimulationLimits = field(default_factory=SimulationLimits)
    tolerances: CertificateTolerances = field(default_factory=CertificateTolerances)
    policy: SimultaneousJumpPolicy = SimultaneousJumpPolicy.X_FIRST
    expected_verdict: Optional[StabilityCase] = None
    seed: int = 0
    dwell_config: Optional[DwellConfig] = None
    output_prefix: Optional[str] = None
