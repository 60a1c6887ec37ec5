import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np
from scipy.linalg import eigh, solve_continuous_lyapunov, svdvals

from app.config import ASSUMPTION_SAMPLES, EIG_GUARD_BAND, SAFETY_FACTOR, TIE_BAND, TOL_PSD
from app.models.hybrid import (
    AffineHybridSystem,
    CombinedArc,
    ControllerDesign,
    DerivedConstants,
    DwellTimeSpec,
    GuardGeometry,
    InvalidDimension,
    LyapunovDesign,
    check_state,
)
from app.models.schemas import (
    Assumption3Report,
    CertificateTolerances,
    ClassKBounds,
    DwellKind,
    FlowLmiReport,
    JumpConditionReport,
    MonitorSummary,
    RegionLabel,
    StabilityCase,
    StabilityVerdict,
    SublevelEstimate,
)
from app.services.distance_service import jump_set_polyhedra

logger = logging.getLogger(__name__)

__all__ = [
    "LyapunovServiceError",
    "SingularDesign",
    "InvalidGeometry",
    "AssumptionViolated",
]

REGIONS = (RegionLabel.S0, RegionLabel.S1, RegionLabel.S2)

# (from, to, jumping component) allowed inside the certified sub-level set
ALLOWED_JUMP_TRANSITIONS = {
    (RegionLabel.S0, RegionLabel.S1, "x"),
    (RegionLabel.S1, RegionLabel.S0, "y"),
    (RegionLabel.S0, RegionLabel.S2, "y"),
    (RegionLabel.S2, RegionLabel.S0, "x"),
}


class LyapunovServiceError(Exception):
    """Base exception for certificate computations."""
    pass


class SingularDesign(LyapunovServiceError):
    """Raised when L + MJ is not invertible."""
    pass


class InvalidGeometry(LyapunovServiceError):
    """Raised when the guard geometry admits no positive sub-level constants."""
    pass


class AssumptionViolated(LyapunovServiceError):
    """Raised when a sampled point violates one of the guard separation conditions."""

    def __init__(self, message: str, bullet: int, witness: np.ndarray):
        super().__init__(message)
        self.bullet = bullet
        self.witness = witness


# Extended jump map

def jump_matrix(sys: AffineHybridSystem, design: LyapunovDesign) -> np.ndarray:
    """L + MJ; raises SingularDesign when it cannot be inverted reliably."""
    matrix = sys.L + np.outer(design.M, sys.J)
    if np.linalg.cond(matrix) > 1e12:
        raise SingularDesign("L + MJ is singular")
    return matrix


def gbar(sys: AffineHybridSystem, design: LyapunovDesign, x) -> np.ndarray:
    """Extended jump map; accepts one state or a stack of states (one per row)."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != sys.n:
        raise InvalidDimension(f"x: expected rows of length {sys.n}, got {X.shape[1]}")
    guard = X @ sys.J + sys.K
    lift = np.maximum(0.0, X @ sys.z1 + sys.z2)
    G = X @ sys.L.T + sys.H + np.outer(guard, design.M) + sys.s * np.outer(lift, sys.L @ sys.J)
    return G[0] if single else G


def gbar_inverse(sys: AffineHybridSystem, design: LyapunovDesign, x) -> np.ndarray:
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    rhs = X - sys.H - design.M * sys.K
    Z = np.linalg.solve(jump_matrix(sys, design), rhs.T).T
    return Z[0] if single else Z


# Piecewise-quadratic function

def _quadratic(P: np.ndarray, E: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk,ik->i", E, P, E)


def branch_values(sys: AffineHybridSystem, design: LyapunovDesign, X, Y) -> np.ndarray:
    """Rows of (|x-y|^2_P0, |x-Gbar(y)|^2_Ps, |Gbar(x)-y|^2_Ps)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return np.column_stack([
        _quadratic(design.P0, X - Y),
        _quadratic(design.Ps, X - gbar(sys, design, Y)),
        _quadratic(design.Ps, gbar(sys, design, X) - Y),
    ])


def classify(values: np.ndarray, tie_band: float = TIE_BAND) -> np.ndarray:
    """Index of the smallest branch per row; ties within tie_band go to the lowest index."""
    values = np.atleast_2d(values)
    lowest = values.min(axis=1, keepdims=True)
    return np.argmax(values <= lowest + tie_band, axis=1)


def lyapunov_value(design: LyapunovDesign, sys: AffineHybridSystem, x, y) -> tuple[float, RegionLabel]:
    x = check_state("x", x, sys.n)
    y = check_state("y", y, sys.n)
    values = branch_values(sys, design, x, y)
    index = int(classify(values)[0])
    return float(values[0, index]), REGIONS[index]


# Matrix conditions

def _sym(matrix: np.ndarray) -> np.ndarray:
    return matrix + matrix.T


def _largest_eig(matrix: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (matrix + matrix.T))[-1])


def gate_value(sys: AffineHybridSystem, design: LyapunovDesign) -> float:
    """s(1 + J L^-1 M); the design requires it to be negative."""
    return float(sys.s * (1.0 + sys.J_Linv @ design.M))


def check_jump_conditions(
    design: LyapunovDesign, sys: AffineHybridSystem, tol_psd: float = TOL_PSD
) -> JumpConditionReport:
    G = jump_matrix(sys, design)
    growth = math.exp(design.lambda_d)
    margins = (
        _largest_eig(G.T @ design.Ps @ G - growth * design.P0),
        _largest_eig(design.P0 - growth * design.Ps),
    )
    return JumpConditionReport(
        ok=all(m <= tol_psd for m in margins),
        eig_margins=margins,
        gate=gate_value(sys, design),
    )


def closed_loop_matrices(
    sys: AffineHybridSystem, design: LyapunovDesign, c0, c1, c2
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Error dynamics matrices in S0, S1 and S2 under the switching feedback."""
    G = jump_matrix(sys, design)
    beta2 = -G @ sys.B
    return (
        sys.A + np.outer(sys.B, c0),
        G @ sys.A @ np.linalg.inv(G) + np.outer(beta2, c1),
        sys.A + np.outer(sys.B, c2),
    )


def check_flow_lmis(
    sys: AffineHybridSystem,
    design: LyapunovDesign,
    controller: ControllerDesign,
    tol_psd: float = TOL_PSD,
) -> FlowLmiReport:
    matrices = closed_loop_matrices(sys, design, controller.c0, controller.c1, controller.c2)
    weights = (design.P0, design.Ps, design.Ps)
    margins = tuple(
        _largest_eig(_sym(P @ Acl) - design.lambda_c * P) for P, Acl in zip(weights, matrices)
    )
    return FlowLmiReport(ok=all(m <= tol_psd for m in margins), eig_margins=margins)


def lyapunov_equation_residual(Acl, P, Q) -> float:
    Acl, P, Q = (np.asarray(m, dtype=float) for m in (Acl, P, Q))
    return float(np.linalg.norm(Acl.T @ P + P @ Acl + Q, "fro"))


def lyapunov_solution(Acl, Q) -> np.ndarray:
    """P with Acl^T P + P Acl = -Q."""
    return solve_continuous_lyapunov(np.asarray(Acl, dtype=float).T, -np.asarray(Q, dtype=float))


def tightest_jump_rate(sys: AffineHybridSystem, design: LyapunovDesign) -> float:
    """Smallest lambda_d for which both jump conditions hold."""
    G = jump_matrix(sys, design)
    first = eigh(G.T @ design.Ps @ G, design.P0, eigvals_only=True)[-1]
    second = eigh(design.P0, design.Ps, eigvals_only=True)[-1]
    return float(math.log(max(first, second)))


def tightest_flow_rate(sys: AffineHybridSystem, design: LyapunovDesign, controller: ControllerDesign) -> float:
    """Smallest lambda_c for which all three flow conditions hold."""
    return _flow_rate(sys, design, controller.c0, controller.c1, controller.c2)


def _flow_rate(sys, design, c0, c1, c2) -> float:
    matrices = closed_loop_matrices(sys, design, c0, c1, c2)
    weights = (design.P0, design.Ps, design.Ps)
    return float(max(
        eigh(_sym(P @ Acl), P, eigvals_only=True)[-1] for P, Acl in zip(weights, matrices)
    ))


def sweep_gains(
    sys: AffineHybridSystem, design: LyapunovDesign, gain_grid: Iterable
) -> list[tuple[np.ndarray, float]]:
    """Rank common gains c0 = c1 = c2 = c by the tightest flow rate they allow."""
    table = []
    for gain in gain_grid:
        c = np.asarray(gain, dtype=float)
        table.append((c, _flow_rate(sys, design, c, c, c)))
    table.sort(key=lambda row: row[1])
    return table


# Sub-level constants

def eigen_bounds(design: LyapunovDesign) -> tuple[float, float]:
    """Guarded (lambda_lo, lambda_hi) enclosing the spectra of P0 and Ps."""
    spectra = np.concatenate([np.linalg.eigvalsh(design.P0), np.linalg.eigvalsh(design.Ps)])
    return float(spectra.min() * (1 - EIG_GUARD_BAND)), float(spectra.max() * (1 + EIG_GUARD_BAND))


def planar_geometry(eps: float, r: float) -> GuardGeometry:
    """Separation constants for a planar impact model with D = {0} x (-inf, -r] and G = -eps I."""
    z3 = min(eps, 0.9) * r
    z4 = 0.99 * r * math.sqrt(1.0 - (z3 / r) ** 2)
    return GuardGeometry(z3=z3, z4=z4, z5=0.99 / math.sqrt(2.0))


def estimate_sublevel(
    sys: AffineHybridSystem,
    design: LyapunovDesign,
    geometry: GuardGeometry,
    safety: float = SAFETY_FACTOR,
) -> SublevelEstimate:
    JLinv_M = float(sys.J_Linv @ design.M)
    gate_plus = -sys.s * (1.0 + JLinv_M)
    gate_minus = -sys.s * (1.0 - JLinv_M)
    if gate_plus <= 0:
        raise InvalidGeometry(f"gate condition violated: s(1 + J L^-1 M) = {-gate_plus:.3g} is not negative")
    ell_g = float(svdvals(jump_matrix(sys, design))[0])

    z1_norm = float(np.linalg.norm(sys.z1))
    n_gd_norm = float(np.linalg.norm(sys.n_gd))
    z3, z4, z5 = geometry.z3, geometry.z4, geometry.z5

    bounds = {
        "separation": min(gate_plus * z4, float(sys.J @ sys.J) * z3) / float(np.linalg.norm(sys.J_Linv)),
        "image_plus": z5 * gate_plus * z3 / (2 * z1_norm * ell_g * n_gd_norm),
        "image_minus": z5 * gate_minus * z3 / (2 * z1_norm * ell_g * n_gd_norm),
        "half_band": z3 / (2 * z1_norm),
    }
    if bounds["image_minus"] <= 0:
        logger.info("Skipping non-positive sign variant of the image bound (%.3g)", bounds["image_minus"])
        del bounds["image_minus"]
    elif not math.isclose(bounds["image_minus"], bounds["image_plus"]):
        logger.info(
            "Image bound sign variants differ (%.6g vs %.6g); using the smaller",
            bounds["image_plus"], bounds["image_minus"],
        )
    if min(bounds.values()) <= 0:
        raise InvalidGeometry(f"non-positive sub-level bound: {bounds}")

    delta1 = safety * min(bounds.values())
    lambda_lo, _ = eigen_bounds(design)
    vL = safety * lambda_lo * min(delta1**2, (3 * z3 / (2 * z1_norm) - delta1) ** 2)
    return SublevelEstimate(
        delta1=delta1, vL=vL, bounds=bounds, ell_g=ell_g, n_gd_norm=n_gd_norm, lambda_lo=lambda_lo,
    )


def class_k_bounds(sys: AffineHybridSystem, design: LyapunovDesign, geometry: GuardGeometry) -> ClassKBounds:
    """Quadratic bounds alpha(r) = coeff * r**2 sandwiching V against the distance."""
    G = jump_matrix(sys, design)
    identity = np.eye(sys.n)
    lifted = G + sys.s * np.outer(sys.L @ sys.J, sys.z1)
    sigma = max(float(svdvals(np.hstack([identity, -block]))[0]) for block in (identity, G, lifted))
    lambda_lo, lambda_hi = eigen_bounds(design)
    LV = math.sqrt(lambda_hi) * sigma

    ell_g = float(svdvals(G)[0])
    gate_plus = -sys.s * (1.0 + float(sys.J_Linv @ design.M))
    kappa = max(1.0, 1.0 + math.sqrt(1.0 + ell_g**2) * float(np.linalg.norm(sys.n_gd)) / (geometry.z5 * gate_plus))
    return ClassKBounds(
        alpha1_nominal=lambda_lo,
        alpha1=lambda_lo / kappa**2,
        alpha2=LV**2,
        sigma=sigma,
        LV=LV,
        kappa=kappa,
    )


def derive_constants(sys: AffineHybridSystem, design: LyapunovDesign, geometry: GuardGeometry) -> LyapunovDesign:
    """Copy of design with the sub-level and class-K constants filled in."""
    sublevel = estimate_sublevel(sys, design, geometry)
    bounds = class_k_bounds(sys, design, geometry)
    lambda_lo, lambda_hi = eigen_bounds(design)
    derived = DerivedConstants(
        delta1=sublevel.delta1,
        vL=sublevel.vL,
        lambda_lo=lambda_lo,
        lambda_hi=lambda_hi,
        LV=bounds.LV,
        sigma=bounds.sigma,
        ell_g=sublevel.ell_g,
    )
    return replace(design, derived=derived)


# Guard separation conditions

@dataclass
class GuardSampler:
    """Random points of C, D, G(D) and of bands around z1 x + z2 = 0.

    Half of every batch is drawn at `local_scale` around the guard corner and
    half at `scale`; points outside the requested set are rejected.
    """
    sys: AffineHybridSystem
    scale: float = 10.0
    local_scale: Optional[float] = None
    seed: int = 0
    max_rounds: int = 200
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        if self.local_scale is None:
            r = max(self.sys.exclusion_radius, self.sys.jump_margin)
            self.local_scale = 5.0 * r if r > 0 else 0.05
        sys = self.sys
        stacked = np.vstack([sys.J, sys.z1])
        self.corner = np.linalg.lstsq(stacked, -np.array([sys.K, sys.z2]), rcond=None)[0]
        self.z1_unit = sys.z1 / np.linalg.norm(sys.z1)
        in_guard = sys.z1 - sys.J * (sys.J @ sys.z1) / (sys.J @ sys.J)
        self.guard_direction = in_guard if np.linalg.norm(in_guard) > 1e-12 else None

    def _raw(self, count: int) -> np.ndarray:
        half = count // 2
        scales = np.concatenate([np.full(half, self.local_scale), np.full(count - half, self.scale)])
        return self.corner + scales[:, None] * self.rng.standard_normal((count, self.sys.n))

    def _spread(self, count: int) -> np.ndarray:
        half = count // 2
        scales = np.concatenate([np.full(half, self.local_scale), np.full(count - half, self.scale)])
        return scales * np.abs(self.rng.standard_normal(count))

    def in_flow_set(self, X: np.ndarray, tol: float = 0.0) -> np.ndarray:
        sys = self.sys
        g = X @ sys.J + sys.K
        c = sys.s * (X @ sys.J_Linv + sys.K - sys.J_Linv @ sys.H)
        inside = (g <= tol) & (c <= tol)
        if sys.exclusion_radius > 0:
            inside &= np.linalg.norm(X, axis=1) >= sys.exclusion_radius
        return inside

    def _collect(self, count: int, draw) -> np.ndarray:
        batches, total = [], 0
        for _ in range(self.max_rounds):
            batch = draw(2 * count)
            batches.append(batch)
            total += batch.shape[0]
            if total >= count:
                return np.vstack(batches)[:count]
        raise InvalidGeometry(f"could only draw {total} of {count} samples")

    def flow_set(self, count: int) -> np.ndarray:
        def draw(m):
            X = self._raw(m)
            return X[self.in_flow_set(X)]
        return self._collect(count, draw)

    def _with_level(self, X: np.ndarray, level: np.ndarray) -> np.ndarray:
        """Shift rows so that z1 x + z2 equals level."""
        h = X @ self.sys.z1 + self.sys.z2
        return X + np.outer((level - h) / np.linalg.norm(self.sys.z1), self.z1_unit)

    def band(self, count: int, width: float) -> np.ndarray:
        """Points of C with |z1 x + z2| <= width."""
        def draw(m):
            X = self._with_level(self._raw(m), self.rng.uniform(-width, width, m))
            return X[self.in_flow_set(X)]
        return self._collect(count, draw)

    def lower_half(self, count: int) -> np.ndarray:
        """Points of C with z1 x + z2 <= 0."""
        def draw(m):
            X = self._with_level(self._raw(m), -self._spread(m))
            return X[self.in_flow_set(X)]
        return self._collect(count, draw)

    def jump_set(self, count: int) -> np.ndarray:
        sys = self.sys
        margin = sys.jump_margin

        def draw(m):
            X = self._raw(m)
            X = X - np.outer((X @ sys.J + sys.K) / (sys.J @ sys.J), sys.J)
            if self.guard_direction is not None:
                h = X @ sys.z1 + sys.z2
                target = -margin - self._spread(m)
                X = X + np.outer((target - h) / (sys.z1 @ self.guard_direction), self.guard_direction)
            h = X @ sys.z1 + sys.z2
            return X[(h <= -margin) & self.in_flow_set(X, tol=1e-12)]
        return self._collect(count, draw)

    def jump_image(self, count: int) -> np.ndarray:
        return self.jump_set(count) @ self.sys.L.T + self.sys.H


def verify_assumption3(
    sys: AffineHybridSystem,
    geometry: GuardGeometry,
    sampler: Optional[GuardSampler] = None,
    samples: int = ASSUMPTION_SAMPLES,
    tol: float = 1e-12,
) -> Assumption3Report:
    """Check the three guard separation conditions on random samples.

    Raises AssumptionViolated with the worst sample when a condition fails.
    """
    sampler = sampler or GuardSampler(sys)
    z3, z4, z5 = geometry.z3, geometry.z4, geometry.z5

    image = sampler.jump_image(samples)
    first = image @ sys.z1 + sys.z2 - z3

    band = sampler.band(samples, z3)
    second = -(band @ sys.J + sys.K) - z4

    lower = sampler.lower_half(samples)
    jump_set, _ = jump_set_polyhedra(sys)
    dist, _ = jump_set.project(lower)
    third = -(lower @ sys.J + sys.K) - z5 * dist

    checks = (
        (1, first, image, first >= -tol),
        (2, second, band, second > 0),
        (3, third, lower, third >= -tol * (1.0 + dist)),
    )
    for bullet, margin, points, holds in checks:
        if not np.all(holds):
            k = int(np.argmin(margin))
            raise AssumptionViolated(
                f"guard separation condition {bullet} fails at {points[k].tolist()} (margin {margin[k]:.3g})",
                bullet,
                points[k],
            )
    return Assumption3Report(
        ok=True,
        samples=samples,
        margins=(float(first.min()), float(second.min()), float(third.min())),
    )


# Stability verdicts

def stability_verdict(design: LyapunovDesign, dwell: Optional[DwellTimeSpec] = None) -> StabilityVerdict:
    """First applicable stability case, with the basin constant when constants are derived."""
    lc, ld = design.lambda_c, design.lambda_d
    margins = {"lambda_c": lc, "lambda_d": ld}
    case = StabilityCase.INCONCLUSIVE
    basin = None

    if lc < 0 and ld <= 0:
        case, basin = StabilityCase.CASE1, 1.0
    elif dwell is not None and math.isfinite(dwell.tau):
        rate = ld + lc * dwell.tau
        margins["rate"] = rate
        if dwell.kind == DwellKind.MINIMAL_AVERAGE and lc <= 0 and rate < 0:
            case, basin = StabilityCase.CASE2, math.exp(max(ld, 0.0) * dwell.N0)
        elif dwell.kind == DwellKind.MAXIMAL_AVERAGE and ld <= 0 and rate < 0:
            case, basin = StabilityCase.CASE3, math.exp(max(lc, 0.0) * dwell.N0 * dwell.tau)

    level = None
    if basin is not None and design.derived is not None:
        level = design.derived.vL / basin
    return StabilityVerdict(case=case, margins=margins, basin_constant=basin, basin_level=level)


# Monitoring along combined arcs

@dataclass(frozen=True)
class RegionTransition:
    t: float
    j: int
    source: RegionLabel
    target: RegionLabel
    via: str  # "flow", "x" or "y"
    pre_value: float
    expected: bool


@dataclass(frozen=True)
class JumpCheck:
    t: float
    j: int
    component: str
    pre_value: float
    post_value: float
    holds: bool


@dataclass
class VMonitor:
    t: np.ndarray
    j: np.ndarray
    values: np.ndarray
    regions: np.ndarray
    flow_violations: list[tuple[float, int, float]] = field(default_factory=list)
    jump_checks: list[JumpCheck] = field(default_factory=list)
    envelope_violations: list[tuple[float, int, float]] = field(default_factory=list)
    transitions: list[RegionTransition] = field(default_factory=list)
    left_basin: bool = False

    @property
    def jump_violations(self) -> list[JumpCheck]:
        return [check for check in self.jump_checks if not check.holds]

    def summary(self) -> MonitorSummary:
        return MonitorSummary(
            samples=int(self.values.size),
            max_V=float(self.values.max()),
            final_V=float(self.values[-1]),
            flow_violations=len(self.flow_violations),
            jump_violations=len(self.jump_violations),
            envelope_violations=len(self.envelope_violations),
            transitions=len(self.transitions),
            unexpected_transitions=sum(not item.expected for item in self.transitions),
            left_basin=self.left_basin,
        )


def monitor_V_along_arc(
    combined: CombinedArc,
    sys: AffineHybridSystem,
    design: LyapunovDesign,
    tolerances: Optional[CertificateTolerances] = None,
) -> VMonitor:
    """Evaluate V along a combined arc and check its flow and jump decay.

    Flow decay is checked on each interval against its first sample, the jump
    decay at each combined jump, and the envelope e^{lc (t - t0) + ld j} V0
    over the whole arc. Violations are recorded, never raised.
    """
    tolerances = tolerances or CertificateTolerances()
    t, j, x, y = combined.samples()
    values_all = branch_values(sys, design, x, y)
    index = classify(values_all, tolerances.tie_band)
    values = values_all[np.arange(index.size), index]
    regions = np.array([REGIONS[k] for k in index], dtype=object)
    monitor = VMonitor(t=t, j=j, values=values, regions=regions)

    lc, ld = design.lambda_c, design.lambda_d
    floor = 1e-12 * (1.0 + float(values.max()))
    vL = design.derived.vL if design.derived is not None else None
    jump_gate = vL / max(1.0, math.exp(-ld)) if vL is not None else None

    # flow decay per interval
    offset = 0
    starts = []
    for segment in combined.segments:
        size = segment.t.size
        starts.append(offset)
        sl = slice(offset, offset + size)
        elapsed = t[sl] - t[offset]
        bound = np.exp(lc * elapsed) * values[offset] * (1.0 + tolerances.flow_ratio_tol) + floor
        for k in np.flatnonzero(values[sl] > bound):
            monitor.flow_violations.append((float(t[offset + k]), int(segment.j), float(values[offset + k])))
        for k in range(offset, offset + size - 1):
            if index[k + 1] != index[k]:
                inside = vL is not None and max(values[k], values[k + 1]) <= vL
                monitor.transitions.append(RegionTransition(
                    t=float(t[k + 1]), j=int(segment.j), source=REGIONS[index[k]], target=REGIONS[index[k + 1]],
                    via="flow", pre_value=float(values[k]), expected=not inside,
                ))
                if inside:
                    logger.warning("Region changed during flow inside the certified sub-level set at t=%.12g", t[k + 1])
        offset += size

    # jumps: last sample of interval k to first sample of interval k + 1
    for jump in combined.jumps:
        if jump.j + 1 >= len(starts):
            break
        pre_k = starts[jump.j + 1] - 1
        post_k = starts[jump.j + 1]
        pre, post = float(values[pre_k]), float(values[post_k])
        holds = post <= math.exp(ld) * pre * (1.0 + tolerances.jump_rel_tol) + floor
        monitor.jump_checks.append(JumpCheck(jump.t, jump.j, jump.component, pre, post, holds))
        if index[pre_k] != index[post_k]:
            move = (REGIONS[index[pre_k]], REGIONS[index[post_k]], jump.component)
            expected = move in ALLOWED_JUMP_TRANSITIONS or jump_gate is None or pre > jump_gate
            monitor.transitions.append(RegionTransition(
                t=float(jump.t), j=int(jump.j), source=move[0], target=move[1],
                via=jump.component, pre_value=pre, expected=expected,
            ))

    envelope = values[0] * np.exp(lc * (t - t[0]) + ld * j) * (1.0 + tolerances.flow_ratio_tol) + floor
    for k in np.flatnonzero(values > envelope):
        monitor.envelope_violations.append((float(t[k]), int(j[k]), float(values[k])))

    if vL is not None:
        inside = values <= vL
        if np.any(inside):
            first = int(np.argmax(inside))
            monitor.left_basin = bool(np.any(~inside[first:]))

    logger.debug(
        "Monitored %d samples: %d flow, %d jump, %d envelope violations",
        values.size, len(monitor.flow_violations), len(monitor.jump_violations), len(monitor.envelope_violations),
    )
    return monitor
