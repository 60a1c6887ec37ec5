import itertools
import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog, minimize

from app.config import KBAR_MAX, PROJECTION_TOL
from app.models.hybrid import AffineHybridSystem, CombinedArc, check_state
from app.services.hybrid_service import OutsideStateSpace

logger = logging.getLogger(__name__)

STATE_TOL = 1e-9


class DistanceServiceError(Exception):
    """Base exception for distance evaluation errors."""
    pass


class OracleAccuracy(DistanceServiceError):
    """Raised when a brute-force grid cannot meet the requested accuracy."""
    pass


class UnboundedJumpChain(DistanceServiceError):
    """Raised when G^k(D) meets D for every k up to the configured maximum."""
    pass


# Polyhedra

@dataclass(frozen=True, eq=False)
class Polyhedron:
    """{w : eq_matrix w = eq_offset, ineq_matrix w <= ineq_offset}."""
    eq_matrix: np.ndarray
    eq_offset: np.ndarray
    ineq_matrix: np.ndarray
    ineq_offset: np.ndarray

    @property
    def dim(self) -> int:
        return self.eq_matrix.shape[1] if self.eq_matrix.size else self.ineq_matrix.shape[1]

    @cached_property
    def active_sets(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        """Equality-constrained projectors for every subset of inequalities, smallest first."""
        projectors = []
        m = self.ineq_matrix.shape[0]
        subsets = [
            np.array(active, dtype=int)
            for size in range(m + 1)
            for active in itertools.combinations(range(m), size)
        ]
        for active in subsets:
            A = np.vstack([self.eq_matrix, self.ineq_matrix[active]])
            b = np.concatenate([self.eq_offset, self.ineq_offset[active]])
            if A.shape[0] == 0:
                projectors.append((active, A, b, np.zeros((self.dim, 0)), np.zeros((0, 0))))
                continue
            projectors.append((active, A, b, np.linalg.pinv(A), np.linalg.pinv(A @ A.T)))
        return projectors

    def contains(self, w: np.ndarray, tol: float) -> bool:
        if self.eq_matrix.size and np.max(np.abs(self.eq_matrix @ w - self.eq_offset)) > tol:
            return False
        return not self.ineq_matrix.size or bool(np.all(self.ineq_matrix @ w <= self.ineq_offset + tol))

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Euclidean projection of each row of points; returns (distances, projections).

        Active sets are tried smallest first. A candidate satisfying primal and
        dual feasibility is the projection; otherwise the closest primal
        feasible candidate is kept.
        """
        points = np.atleast_2d(points)
        count = points.shape[0]
        best = np.full(count, np.inf)
        projections = np.full(points.shape, np.nan)
        solved = np.zeros(count, dtype=bool)
        n_eq = self.eq_matrix.shape[0]
        tol = PROJECTION_TOL * (1.0 + np.max(np.abs(points), axis=1))

        for active, A, b, A_pinv, gram_pinv in self.active_sets:
            pending = ~solved
            if not np.any(pending):
                break
            P = points[pending]
            if A.shape[0]:
                residual = P @ A.T - b
                W = P - residual @ A_pinv.T
                consistent = np.max(np.abs(W @ A.T - b), axis=1) <= 100 * tol[pending]
                multipliers = residual @ gram_pinv.T
                dual_ok = np.all(multipliers[:, n_eq:] >= -100 * tol[pending, None], axis=1)
            else:
                W = P.copy()
                consistent = np.ones(P.shape[0], dtype=bool)
                dual_ok = consistent
            if self.ineq_matrix.size:
                primal_ok = np.all(W @ self.ineq_matrix.T <= self.ineq_offset + 100 * tol[pending, None], axis=1)
            else:
                primal_ok = np.ones(P.shape[0], dtype=bool)

            feasible = consistent & primal_ok
            distances = np.linalg.norm(P - W, axis=1)
            index = np.flatnonzero(pending)
            better = feasible & (distances < best[index])
            best[index[better]] = distances[better]
            projections[index[better]] = W[better]
            solved[index[feasible & dual_ok]] = True
        return best, projections


def _deduplicate(poly: Polyhedron, tol: float = 1e-12) -> Optional[Polyhedron]:
    """Drop inequality rows that are constant on the affine hull or repeated.

    Returns None when such a constant row is violated (empty polyhedron).
    """
    E, e, G, g = poly.eq_matrix, poly.eq_offset, poly.ineq_matrix, poly.ineq_offset
    if E.size:
        particular = np.linalg.lstsq(E, e, rcond=None)[0]
        row_space = np.linalg.pinv(E) @ E
    else:
        particular = np.zeros(G.shape[1])
        row_space = np.zeros((G.shape[1], G.shape[1]))

    rows, offsets = [], []
    for a, c in zip(G, g):
        scale = np.linalg.norm(a)
        if scale == 0:
            if c < -tol:
                return None
            continue
        if np.linalg.norm(a - a @ row_space) <= tol * scale:
            if a @ particular > c + tol * max(1.0, abs(c)):
                return None
            continue
        a_unit, c_unit = a / scale, c / scale
        for k, (b, d) in enumerate(zip(rows, offsets)):
            if np.allclose(a_unit, b, atol=tol):
                offsets[k] = min(d, c_unit)
                break
        else:
            rows.append(a_unit)
            offsets.append(c_unit)

    dim = G.shape[1] if G.size else E.shape[1]
    return Polyhedron(
        eq_matrix=E,
        eq_offset=e,
        ineq_matrix=np.array(rows).reshape(-1, dim),
        ineq_offset=np.array(offsets),
    )


def _chain_rows(sys: AffineHybridSystem, k: int, final_in_C: bool):
    """Constraints on z for z, G(z), ..., G^{k-1}(z) in D (and G^k(z) in C).

    Returns (eq rows, eq offsets, ineq rows, ineq offsets, L^k, c_k) with
    G^k(z) = L^k z + c_k.
    """
    n = sys.n
    eq_rows, eq_offsets, ineq_rows, ineq_offsets = [], [], [], []
    power, shift = np.eye(n), np.zeros(n)
    facet_offset = sys.s * (sys.K - sys.J_Linv @ sys.H)
    for _ in range(k):
        eq_rows.append(sys.J @ power)
        eq_offsets.append(-sys.K - sys.J @ shift)
        ineq_rows.append(sys.z1 @ power)
        ineq_offsets.append(-sys.jump_margin - sys.z2 - sys.z1 @ shift)
        ineq_rows.append(sys.s * sys.J_Linv @ power)
        ineq_offsets.append(-facet_offset - sys.s * sys.J_Linv @ shift)
        power, shift = sys.L @ power, sys.L @ shift + sys.H
    if final_in_C:
        ineq_rows.append(sys.J @ power)
        ineq_offsets.append(-sys.K - sys.J @ shift)
        ineq_rows.append(sys.s * sys.J_Linv @ power)
        ineq_offsets.append(-facet_offset - sys.s * sys.J_Linv @ shift)
    return eq_rows, eq_offsets, ineq_rows, ineq_offsets, power, shift


def _stack(rows: list, offsets: list, dim: int) -> tuple[np.ndarray, np.ndarray]:
    return np.array(rows, dtype=float).reshape(-1, dim), np.array(offsets, dtype=float)


# Jump-chain branches

@dataclass(frozen=True, eq=False)
class AffineBranch:
    """Pairs (z_x, z_y) with G^k1(z_x) = G^k2(z_y), as a polyhedron in R^2n."""
    k1: int
    k2: int
    polyhedron: Polyhedron


@dataclass(frozen=True, eq=False)
class JumpChainSet:
    kbar: int
    branches: tuple[AffineBranch, ...]


def _branch(sys: AffineHybridSystem, k1: int, k2: int) -> Optional[AffineBranch]:
    """Branch with at most one of k1, k2 nonzero; the jumping variable carries the chain."""
    n = sys.n
    k = max(k1, k2)
    eq_rows, eq_offsets, ineq_rows, ineq_offsets, power, shift = _chain_rows(sys, k, final_in_C=True)
    # Chain rows act on the jumping variable: z_y for (0, k), z_x for (k, 0) and (0, 0).
    on_y = k2 > 0
    pad = np.zeros(n)

    def lift(row):
        return np.concatenate([pad, row]) if on_y else np.concatenate([row, pad])

    E = [lift(row) for row in eq_rows]
    G = [lift(row) for row in ineq_rows]
    # Link: z_free - G^k(z_jumping) = 0.
    link = np.hstack([np.eye(n), -power]) if on_y else np.hstack([-power, np.eye(n)])
    E_matrix, e_vector = _stack(E, eq_offsets, 2 * n)
    G_matrix, g_vector = _stack(G, ineq_offsets, 2 * n)
    poly = _deduplicate(Polyhedron(
        eq_matrix=np.vstack([link, E_matrix]),
        eq_offset=np.concatenate([shift, e_vector]),
        ineq_matrix=G_matrix,
        ineq_offset=g_vector,
    ))
    if poly is None:
        logger.debug("Branch (%d, %d) is empty", k1, k2)
        return None
    return AffineBranch(k1=k1, k2=k2, polyhedron=poly)


def _chain_feasible(sys: AffineHybridSystem, k: int) -> bool:
    """Whether some z has z, G(z), ..., G^k(z) all in D."""
    eq_rows, eq_offsets, ineq_rows, ineq_offsets, _, _ = _chain_rows(sys, k + 1, final_in_C=False)
    A_eq, b_eq = _stack(eq_rows, eq_offsets, sys.n)
    A_ub, b_ub = _stack(ineq_rows, ineq_offsets, sys.n)
    result = linprog(
        np.zeros(sys.n),
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=[(None, None)] * sys.n,
        method="highs",
    )
    return result.status != 2


@lru_cache(maxsize=64)
def jump_chain_set(sys: AffineHybridSystem, kbar_max: int = KBAR_MAX) -> JumpChainSet:
    """Branches of the set of pairs connected by at most kbar jumps."""
    for kbar in range(1, kbar_max + 1):
        if not _chain_feasible(sys, kbar):
            break
    else:
        raise UnboundedJumpChain(f"G^k(D) meets D for every k <= {kbar_max}")

    branches = [_branch(sys, 0, 0)]
    for k in range(1, kbar + 1):
        branches.append(_branch(sys, 0, k))
        branches.append(_branch(sys, k, 0))
    return JumpChainSet(kbar=kbar, branches=tuple(b for b in branches if b is not None))


# Distance

def _check_points(sys: AffineHybridSystem, X: np.ndarray, name: str, tol: float) -> None:
    g = X @ sys.J + sys.K
    c = sys.s * (X @ sys.J_Linv + sys.K - sys.J_Linv @ sys.H)
    scale = 1.0 + np.max(np.abs(X), axis=1)
    outside = (g > tol * scale) | (c > tol * scale)
    if sys.exclusion_radius > 0:
        outside |= np.linalg.norm(X, axis=1) < sys.exclusion_radius - tol
    if np.any(outside):
        k = int(np.argmax(outside))
        raise OutsideStateSpace(f"{name}={X[k].tolist()} is outside C and D")


def _canonical_order(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Swap rows so that x precedes y lexicographically."""
    difference = X - Y
    first = np.argmax(difference != 0, axis=1)
    swap = difference[np.arange(X.shape[0]), first] > 0
    return np.where(swap[:, None], Y, X), np.where(swap[:, None], X, Y)


def distance_many(
    sys: AffineHybridSystem,
    X: np.ndarray,
    Y: np.ndarray,
    kbar_max: int = KBAR_MAX,
    tol: float = STATE_TOL,
) -> np.ndarray:
    """Row-wise distance between two stacks of states."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape != Y.shape or X.shape[1] != sys.n:
        raise OutsideStateSpace(f"state stacks of shape {X.shape} and {Y.shape} do not match n={sys.n}")
    _check_points(sys, X, "x", tol)
    _check_points(sys, Y, "y", tol)
    X, Y = _canonical_order(X, Y)
    points = np.hstack([X, Y])
    chain = jump_chain_set(sys, kbar_max)
    return np.min([branch.polyhedron.project(points)[0] for branch in chain.branches], axis=0)


def distance(sys: AffineHybridSystem, x, y, kbar_max: int = KBAR_MAX, tol: float = STATE_TOL) -> float:
    x = check_state("x", x, sys.n)
    y = check_state("y", y, sys.n)
    return float(distance_many(sys, x[None, :], y[None, :], kbar_max, tol)[0])


def in_A(sys: AffineHybridSystem, x, y, tol: float, kbar_max: int = KBAR_MAX) -> bool:
    """Whether (x, y) lies on a jump-chain branch within tol."""
    x = check_state("x", x, sys.n)
    y = check_state("y", y, sys.n)
    w = np.concatenate([x, y])
    return any(branch.polyhedron.contains(w, tol) for branch in jump_chain_set(sys, kbar_max).branches)


def jump_set_polyhedra(sys: AffineHybridSystem) -> tuple[Polyhedron, Polyhedron]:
    """D and G(D) as polyhedra in R^n."""
    eq_rows, eq_offsets, ineq_rows, ineq_offsets, _, _ = _chain_rows(sys, 1, final_in_C=False)
    E, e = _stack(eq_rows, eq_offsets, sys.n)
    G, g = _stack(ineq_rows, ineq_offsets, sys.n)
    jump_set = _deduplicate(Polyhedron(E, e, G, g))
    # w = Lz + H  <=>  z = L^-1 (w - H)
    image = _deduplicate(Polyhedron(
        E @ sys.L_inv, e + E @ sys.L_inv @ sys.H,
        G @ sys.L_inv, g + G @ sys.L_inv @ sys.H,
    ))
    return jump_set, image


def distance_to_jump_sets(sys: AffineHybridSystem, x) -> float:
    """Euclidean distance from x to D union G(D)."""
    x = check_state("x", x, sys.n)
    return float(min(poly.project(x[None, :])[0][0] for poly in jump_set_polyhedra(sys)))


# Closed forms for the planar impact examples

def d0_closed(x, y) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) / np.sqrt(2.0))


def d1_closed(x, y, eps: float, r: float) -> float:
    """Distance to pairs (G(z), z) with z in D = {0} x (-inf, -r] and G = -eps I."""
    x1, x2 = float(x[0]), float(x[1])
    y1, y2 = float(y[0]), float(y[1])
    if (y2 - eps * x2) / (1 + eps**2) < -r:
        return float(np.sqrt(x1**2 + y1**2 + (eps * y2 + x2) ** 2 / (1 + eps**2)))
    return float(np.sqrt(x1**2 + y1**2 + (x2 - eps * r) ** 2 + (y2 + r) ** 2))


def planar_distance(x, y, eps: float, r: float) -> float:
    return min(d0_closed(x, y), d1_closed(x, y, eps, r), d1_closed(y, x, eps, r))


# Brute-force oracle

@dataclass(frozen=True)
class GridSpec:
    points: int = 101
    levels: int = 8
    span: float = 2.0
    accuracy: float = 1e-3
    max_grid_points: int = 2_000_000


def _oracle_branch(poly: Polyhedron, p: np.ndarray, spec: GridSpec) -> float:
    E, e, G, g = poly.eq_matrix, poly.eq_offset, poly.ineq_matrix, poly.ineq_offset
    w0 = np.linalg.lstsq(E, e, rcond=None)[0]
    N = null_space(E)
    dim = N.shape[1]
    tol = 1e-10 * (1.0 + np.max(np.abs(p)))

    def feasible(W):
        return np.all(W @ G.T <= g + tol, axis=-1) if G.size else np.ones(W.shape[0], dtype=bool)

    if dim == 0:
        return float(np.linalg.norm(p - w0)) if feasible(w0[None, :])[0] else np.inf

    center = N.T @ (p - w0)
    half = spec.span * (1.0 + np.linalg.norm(p) + np.linalg.norm(w0))
    best = np.inf
    hull_point = w0 + N @ center
    if feasible(hull_point[None, :])[0]:
        best = float(np.linalg.norm(p - hull_point))

    for level in range(spec.levels):
        axes = [np.linspace(c - half, c + half, spec.points) for c in center]
        theta = np.stack([a.reshape(-1) for a in np.meshgrid(*axes, indexing="ij")], axis=1)
        W = w0 + theta @ N.T
        ok = feasible(W)
        if not np.any(ok):
            if level == 0 and not np.isfinite(best):
                return np.inf
            break
        objective = np.where(ok, np.linalg.norm(W - p, axis=1), np.inf)
        k = int(np.argmin(objective))
        if objective[k] < best:
            best = float(objective[k])
            center = theta[k]
        half = 2.0 * (2.0 * half / (spec.points - 1))

    constraints = [{"type": "ineq", "fun": lambda th: g - G @ (w0 + N @ th)}] if G.size else []
    refined = minimize(
        lambda th: float(np.sum((w0 + N @ th - p) ** 2)),
        center,
        jac=lambda th: 2.0 * N.T @ (w0 + N @ th - p),
        method="SLSQP",
        constraints=constraints,
        options={"ftol": 1e-16, "maxiter": 500},
    )
    candidate = w0 + N @ refined.x
    if feasible(candidate[None, :])[0]:
        best = min(best, float(np.linalg.norm(candidate - p)))
    return best


def distance_oracle(
    sys: AffineHybridSystem,
    x,
    y,
    grid_spec: Optional[GridSpec] = None,
    kbar_max: int = KBAR_MAX,
) -> float:
    """Grid search plus local refinement over each branch's parameterization."""
    spec = grid_spec or GridSpec()
    x = check_state("x", x, sys.n)
    y = check_state("y", y, sys.n)
    _check_points(sys, x[None, :], "x", STATE_TOL)
    _check_points(sys, y[None, :], "y", STATE_TOL)
    p = np.concatenate([x, y])
    chain = jump_chain_set(sys, kbar_max)

    for branch in chain.branches:
        dim = null_space(branch.polyhedron.eq_matrix).shape[1]
        if spec.points**dim > spec.max_grid_points:
            raise OracleAccuracy(f"branch ({branch.k1}, {branch.k2}) needs {spec.points}^{dim} grid points")
        first_spacing = 2 * spec.span * (1.0 + np.linalg.norm(p)) / (spec.points - 1)
        final_spacing = first_spacing * (4.0 / (spec.points - 1)) ** (spec.levels - 1)
        if final_spacing * np.sqrt(dim) / 2 > spec.accuracy:
            raise OracleAccuracy(f"grid error bound {final_spacing:.3g} exceeds requested accuracy {spec.accuracy:g}")

    if any(branch.polyhedron.contains(p, 0.0) for branch in chain.branches):
        return 0.0
    return float(min(_oracle_branch(branch.polyhedron, p, spec) for branch in chain.branches))


# Profiles along combined arcs

@dataclass(frozen=True)
class Profile:
    t: np.ndarray
    j: np.ndarray
    values: np.ndarray


def distance_profile(sys: AffineHybridSystem, combined: CombinedArc, kbar_max: int = KBAR_MAX) -> Profile:
    t, j, x, y = combined.samples()
    return Profile(t=t, j=j, values=distance_many(sys, x, y, kbar_max, tol=1e-8))


def euclidean_profile(combined: CombinedArc) -> Profile:
    t, j, x, y = combined.samples()
    return Profile(t=t, j=j, values=np.linalg.norm(x - y, axis=1))
