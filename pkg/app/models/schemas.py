from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional
from enum import Enum
import math

import numpy as np

from app.config import (
    TOL_EVENT,
    RTOL,
    ATOL,
    SAMPLE_DT,
    MAX_JUMPS,
    ZENO_WINDOW,
    ESCAPE_BOUND,
    TOL_PSD,
    TIE_BAND,
    HYSTERESIS,
    SAFETY_FACTOR,
    FLOW_RATIO_TOL,
    JUMP_REL_TOL,
    ASSUMPTION_SAMPLES,
    KBAR_MAX,
    ENUMERATION_DEPTH,
    DEFAULT_SEED,
)


class Termination(str, Enum):
    HORIZON_REACHED = "HorizonReached"
    LEFT_FLOW_SET = "LeftFlowSet"
    ZENO_LIMIT = "ZenoLimit"
    ESCAPE_DETECTED = "EscapeDetected"


class Attribution(str, Enum):
    X_JUMPED = "XJumped"
    Y_JUMPED = "YJumped"
    BOTH_ENUMERATED = "BothEnumerated"


class RegionLabel(str, Enum):
    S0 = "S0"
    S1 = "S1"
    S2 = "S2"

    @property
    def index(self) -> int:
        return int(self.value[1])


class StabilityCase(str, Enum):
    CASE1 = "Case1"
    CASE2 = "Case2"
    CASE3 = "Case3"
    INCONCLUSIVE = "Inconclusive"


class DwellKind(str, Enum):
    MINIMAL_AVERAGE = "MinimalAverage"
    MAXIMAL_AVERAGE = "MaximalAverage"


class SimultaneousJumpPolicy(str, Enum):
    X_FIRST = "XFirst"
    ENUMERATE_BOTH = "EnumerateBoth"
    STRICT = "Strict"


class FeedforwardKind(str, Enum):
    ZERO = "zero"
    CONSTANT = "constant"
    COSINE = "cosine"


class RunStatus(str, Enum):
    QUEUED = "queued"
    LOADING = "loading"
    CERTIFYING = "certifying"
    SIMULATING = "simulating"
    TRACKING = "tracking"
    WRITING = "writing"
    COMPLETED = "completed"
    FAILED = "failed"


# Scenario configuration

Matrix = list[list[float]]
Vector = list[float]


class _ConfigModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SimulationLimits(_ConfigModel):
    tol_event: float = Field(TOL_EVENT, gt=0)
    rtol: float = Field(RTOL, gt=0)
    atol: float = Field(ATOL, gt=0)
    sample_dt: float = Field(SAMPLE_DT, gt=0, le=1e-3)
    max_jumps: int = Field(MAX_JUMPS, gt=0)
    zeno_window: float = Field(ZENO_WINDOW, ge=0)
    escape_bound: float = Field(ESCAPE_BOUND, gt=0)


class CertificateTolerances(_ConfigModel):
    tol_psd: float = Field(TOL_PSD, ge=0)
    tie_band: float = Field(TIE_BAND, ge=0)
    hysteresis: float = Field(HYSTERESIS, ge=0)
    safety_factor: float = Field(SAFETY_FACTOR, gt=0, lt=1)
    flow_ratio_tol: float = Field(FLOW_RATIO_TOL, ge=0)
    jump_rel_tol: float = Field(JUMP_REL_TOL, ge=0)
    assumption_samples: int = Field(ASSUMPTION_SAMPLES, gt=0)
    kbar_max: int = Field(KBAR_MAX, ge=1)
    enumeration_depth: int = Field(ENUMERATION_DEPTH, ge=0)


class Feedforward(_ConfigModel):
    """Closed-form feedforward input u_ff(t)."""
    kind: FeedforwardKind = FeedforwardKind.ZERO
    amplitude: float = 0.0
    omega: float = 0.0
    phase: float = 0.0

    def __call__(self, t):
        if self.kind == FeedforwardKind.ZERO:
            return 0.0 * np.asarray(t, dtype=float)
        if self.kind == FeedforwardKind.CONSTANT:
            return self.amplitude + 0.0 * np.asarray(t, dtype=float)
        return self.amplitude * np.cos(self.omega * np.asarray(t, dtype=float) + self.phase)


class SystemConfig(_ConfigModel):
    A: Matrix
    B: Vector
    E: Vector
    L: Matrix
    H: Vector
    J: Vector
    K: float
    z1: Vector
    z2: float
    s: int
    exclusion_radius: float = Field(0.0, ge=0)
    jump_margin: float = Field(0.0, ge=0)

    @field_validator("s")
    @classmethod
    def validate_sign(cls, v: int) -> int:
        if v not in (-1, 1):
            raise ValueError("s must be -1 or +1")
        return v

    @model_validator(mode="after")
    def validate_dimensions(self) -> "SystemConfig":
        n = len(self.A)
        _check_square("A", self.A, n)
        _check_square("L", self.L, n)
        for key in ("B", "E", "H", "J", "z1"):
            if len(getattr(self, key)) != n:
                raise ValueError(f"{key}: expected length {n}, got {len(getattr(self, key))}")
        return self


class DesignConfig(_ConfigModel):
    P0: Matrix
    Ps: Matrix
    M: Vector
    lambda_c: float
    lambda_d: float

    @model_validator(mode="after")
    def validate_dimensions(self) -> "DesignConfig":
        n = len(self.P0)
        _check_square("P0", self.P0, n)
        _check_square("Ps", self.Ps, n)
        if len(self.M) != n:
            raise ValueError(f"M: expected length {n}, got {len(self.M)}")
        return self


class ControllerConfig(_ConfigModel):
    c0: Vector
    c1: Vector
    c2: Optional[Vector] = None


class GeometryConfig(_ConfigModel):
    z3: float = Field(..., gt=0)
    z4: float = Field(..., gt=0)
    z5: float = Field(..., gt=0)


class InitialConditions(_ConfigModel):
    reference: Vector
    tracking: Optional[Vector] = None
    neighbor: Optional[Vector] = None


class DwellConfig(_ConfigModel):
    kind: DwellKind
    tau: Optional[float] = Field(None, gt=0)
    N0: float = Field(2.0, gt=0)
    measure: bool = False

    @model_validator(mode="after")
    def validate_source(self) -> "DwellConfig":
        if self.tau is None and not self.measure:
            raise ValueError("dwell: give tau or set measure: true")
        return self


class ScenarioConfig(_ConfigModel):
    name: str
    system: SystemConfig
    design: DesignConfig
    controller: Optional[ControllerConfig] = None
    feedforward: Feedforward = Feedforward()
    geometry: Optional[GeometryConfig] = None
    initial: InitialConditions
    t0: float = 0.0
    horizon: float = Field(..., ge=0)
    dwell: Optional[DwellConfig] = None
    limits: SimulationLimits = SimulationLimits()
    tolerances: CertificateTolerances = CertificateTolerances()
    policy: SimultaneousJumpPolicy = SimultaneousJumpPolicy.X_FIRST
    expected_verdict: Optional[StabilityCase] = None
    seed: int = DEFAULT_SEED
    output_prefix: Optional[str] = None

    @model_validator(mode="after")
    def validate_dimensions(self) -> "ScenarioConfig":
        n = len(self.system.A)
        if len(self.design.P0) != n:
            raise ValueError(f"design.P0: expected {n}x{n} to match system.A")
        if self.controller is not None:
            for key in ("c0", "c1", "c2"):
                value = getattr(self.controller, key)
                if value is not None and len(value) != n:
                    raise ValueError(f"controller.{key}: expected length {n}")
        for key in ("reference", "tracking", "neighbor"):
            value = getattr(self.initial, key)
            if value is not None and len(value) != n:
                raise ValueError(f"initial.{key}: expected length {n}, got {len(value)}")
        return self


def _check_square(key: str, matrix: Matrix, n: int) -> None:
    if n == 0:
        raise ValueError(f"{key}: empty matrix")
    for i, row in enumerate(matrix):
        if len(row) != n:
            raise ValueError(f"{key}: row {i} has length {len(row)}, expected {n}")


# Certificate and simulation reports

class DwellCheck(BaseModel):
    holds: bool
    worst_pair: tuple[tuple[float, int], tuple[float, int]]
    margin: float


class JumpConditionReport(BaseModel):
    ok: bool
    eig_margins: tuple[float, float]
    gate: float


class FlowLmiReport(BaseModel):
    ok: bool
    eig_margins: tuple[float, float, float]


class SublevelEstimate(BaseModel):
    delta1: float
    vL: float
    bounds: dict[str, float]
    ell_g: float
    n_gd_norm: float
    lambda_lo: float


class ClassKBounds(BaseModel):
    """alpha(r) = coeff * r**2 for each bound."""
    alpha1_nominal: float
    alpha1: float
    alpha2: float
    sigma: float
    LV: float
    kappa: float


class Assumption3Report(BaseModel):
    ok: bool
    samples: int
    margins: tuple[float, float, float]


class StabilityVerdict(BaseModel):
    case: StabilityCase
    margins: dict[str, float] = {}
    basin_constant: Optional[float] = None
    basin_level: Optional[float] = None


class JumpRow(BaseModel):
    t: float
    j: int
    component: str
    pre: list[float]
    post: list[float]


class SimulationSummary(BaseModel):
    trajectory: str
    termination: Termination
    jumps: list[JumpRow]
    file: Optional[str] = None


class MonitorSummary(BaseModel):
    samples: int
    max_V: float
    final_V: float
    flow_violations: int
    jump_violations: int
    envelope_violations: int
    transitions: int
    unexpected_transitions: int
    left_basin: bool


class CertificateSection(BaseModel):
    assumption3: Optional[Assumption3Report] = None
    jump_conditions: Optional[JumpConditionReport] = None
    flow_lmis: Optional[FlowLmiReport] = None
    sublevel: Optional[SublevelEstimate] = None
    class_k: Optional[ClassKBounds] = None
    verdict: Optional[StabilityVerdict] = None
    errors: list[str] = []


class RunReport(BaseModel):
    scenario: str
    command: str
    certificate: Optional[CertificateSection] = None
    simulations: list[SimulationSummary] = []
    monitor: Optional[MonitorSummary] = None
    files: list[str] = []
    errors: list[str] = []
    exit_code: int = 0

