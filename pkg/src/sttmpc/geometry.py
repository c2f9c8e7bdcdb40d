"""Polytope representations and the set computations used by the
controller: support functions, vertex enumeration, intersection, outer box
approximations of norm balls, lambda-contractive template synthesis, and
volumes.

Two representations are kept deliberately separate: axis-aligned boxes,
for which everything is closed form (the online parameter sets stay boxes
because box intersections are boxes), and general H-polytopes {x: Ax <= b}
backed by LPs. Values are immutable; empty intersections are returned and
flagged, never raised, because the estimator treats a collapsed set as
data.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .solvers import LpProblem, SolveStatus, solve_lp

_ACTIVE_TOL = 1e-9


class InfeasibleSet(ValueError):
    """Operation requires a nonempty set."""


class UnboundedSet(ValueError):
    """Operation requires a bounded set (a recession direction exists)."""


class DimensionTooLarge(ValueError):
    """Vertex enumeration refused; count grows exponentially with dim."""


class NoConvergence(RuntimeError):
    """Fixed-point iteration hit its cap without stabilizing."""


class UnstableVertex(ValueError):
    """A vertex dynamics matrix has spectral radius >= 1."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box {x: lower <= x <= upper}.

    An empty box (some lower > upper) is a legal value; every query short
    of membership raises InfeasibleSet on it.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-D arrays of equal length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("NaN bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.lower > self.upper))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def side_lengths(self) -> np.ndarray:
        return self.upper - self.lower

    def to_hpolytope(self) -> "HPolytope":
        n = self.dim
        A = np.vstack([np.eye(n), -np.eye(n)])
        b = np.concatenate([self.upper, -self.lower])
        return HPolytope(A, b)

    def to_json(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @staticmethod
    def from_json(d: dict) -> "Box":
        return Box(np.asarray(d["lower"]), np.asarray(d["upper"]))


@dataclass(frozen=True)
class HPolytope:
    """H-representation {x: Ax <= b}; rows are half-spaces."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.size:
            raise ValueError("A must be m x n with b of length m")
        if np.any(np.isnan(A)) or np.any(np.isnan(b)):
            raise ValueError("NaN entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_halfspaces(self) -> int:
        return self.A.shape[0]

    @property
    def is_empty(self) -> bool:
        rep = solve_lp(LpProblem(c=np.zeros(self.dim), A_ineq=self.A, b_ineq=self.b))
        return rep.status is SolveStatus.Infeasible

    def to_json(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    @staticmethod
    def from_json(d: dict) -> "HPolytope":
        return HPolytope(np.asarray(d["A"]), np.asarray(d["b"]))


@dataclass(frozen=True)
class VRep:
    """Vertex list, one vertex per row."""

    vertices: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        if V.ndim != 2:
            raise ValueError("vertices must be a 2-D array (rows = points)")
        object.__setattr__(self, "vertices", V)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]


# ---------------------------------------------------------------------------
# Support functions
# ---------------------------------------------------------------------------


def support(P, d: np.ndarray) -> float:
    """max_{x in P} d.x for a Box or HPolytope.

    Closed form for boxes; one LP for H-polytopes. Raises InfeasibleSet on
    empty sets and UnboundedSet when d is a recession direction.
    """
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if isinstance(P, Box):
        if P.is_empty:
            raise InfeasibleSet("support of empty box")
        return float(np.where(d > 0, d * P.upper, d * P.lower).sum())
    rep = solve_lp(LpProblem(c=-d, A_ineq=P.A, b_ineq=P.b))
    if rep.status is SolveStatus.Infeasible:
        raise InfeasibleSet("support of empty polytope")
    if rep.status is SolveStatus.Unbounded:
        raise UnboundedSet(f"recession direction {d}")
    if rep.status is not SolveStatus.Optimal:
        raise NoConvergence(f"support LP: {rep.status}")
    return float(-rep.objective)


def minkowski_sum_box(P: Box, Q: Box) -> Box:
    """Minkowski sum of two boxes; support functions add."""
    return Box(P.lower + Q.lower, P.upper + Q.upper)


def outer_box_of_ball(center: np.ndarray, radius: float) -> Box:
    """Axis-aligned box with per-coordinate bounds center +- radius.

    Contains the spectral-norm ball of the same radius for entrywise
    matrix parametrizations, because every entry of a matrix is bounded by
    its spectral norm.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    center = np.atleast_1d(np.asarray(center, dtype=float))
    return Box(center - radius, center + radius)


# ---------------------------------------------------------------------------
# Membership, intersection, volume
# ---------------------------------------------------------------------------


def contains(P, x: np.ndarray, tol: float = 1e-9) -> bool:
    """Membership test with additive slack tol on every half-space."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if isinstance(P, Box):
        return bool(np.all(x >= P.lower - tol) and np.all(x <= P.upper + tol))
    return bool(np.all(P.A @ x <= P.b + tol))


def intersect(P1, P2):
    """Intersection; Box with Box stays a Box, anything else becomes an
    HPolytope with redundant rows pruned. Empty results are returned with
    their is_empty flag set, not raised."""
    if P1.dim != P2.dim:
        raise ValueError("dimension mismatch")
    if isinstance(P1, Box) and isinstance(P2, Box):
        return Box(np.maximum(P1.lower, P2.lower), np.minimum(P1.upper, P2.upper))
    H1 = P1.to_hpolytope() if isinstance(P1, Box) else P1
    H2 = P2.to_hpolytope() if isinstance(P2, Box) else P2
    A = np.vstack([H1.A, H2.A])
    b = np.concatenate([H1.b, H2.b])
    out = HPolytope(A, b)
    if out.is_empty:
        return out
    A2, b2 = prune_redundant(A, b)
    return HPolytope(A2, b2)


def prune_redundant(A: np.ndarray, b: np.ndarray, slack: float = 1e-9):
    """Drop every row whose half-space is implied by the others.

    Row i goes when max A_i.x over the remaining rows is at most
    b_i + slack; a genuine facet strictly enlarges the set when removed,
    so it survives, while duplicates and touching-but-implied rows do
    not. Rows are scanned in order against the currently kept set plus
    the not-yet-scanned tail, so the output is order-dependent but always
    an equivalent description (up to slack).
    """
    m = A.shape[0]
    keep = []
    for i in range(m):
        others = keep + list(range(i + 1, m))
        if not others:
            keep.append(i)
            continue
        rep = solve_lp(LpProblem(c=-A[i], A_ineq=A[others], b_ineq=b[others]))
        if rep.status is SolveStatus.Unbounded:
            keep.append(i)
        elif rep.status is SolveStatus.Optimal and -rep.objective > b[i] + slack:
            keep.append(i)
        elif rep.status is not SolveStatus.Optimal:
            keep.append(i)  # infeasible/maxiter: keep conservatively
    return A[keep], b[keep]


def volume(P, rng: np.random.Generator | None = None, samples: int = 10**6) -> float:
    """Volume; exact side-length product for boxes, Monte Carlo over the
    support bounding box for general H-polytopes (see volume_mc)."""
    if isinstance(P, Box):
        if P.is_empty:
            return 0.0
        return float(np.prod(P.side_lengths))
    vol, _ = volume_mc(P, rng=rng, samples=samples)
    return vol


def volume_mc(P: HPolytope, rng: np.random.Generator | None = None,
              samples: int = 10**6):
    """Monte Carlo volume of an H-polytope with its standard error.

    Samples uniformly from the axis-aligned bounding box found by 2*dim
    support LPs. Deterministic by default (fixed seed) so that volume
    traces are reproducible; pass the run's Monte Carlo stream otherwise.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    dim = P.dim
    lo = np.array([-support(P, -_unit(dim, i)) for i in range(dim)])
    hi = np.array([support(P, _unit(dim, i)) for i in range(dim)])
    box_vol = float(np.prod(hi - lo))
    if box_vol == 0.0:
        return 0.0, 0.0
    hits = 0
    chunk = 200_000
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        pts = rng.uniform(lo, hi, size=(k, dim))
        hits += int(np.sum(np.all(pts @ P.A.T <= P.b + _ACTIVE_TOL, axis=1)))
        done += k
    frac = hits / samples
    stderr = box_vol * np.sqrt(max(frac * (1 - frac), 0.0) / samples)
    return box_vol * frac, float(stderr)


def _unit(n: int, i: int) -> np.ndarray:
    e = np.zeros(n)
    e[i] = 1.0
    return e


# ---------------------------------------------------------------------------
# Vertex enumeration
# ---------------------------------------------------------------------------


def vertices(P) -> VRep:
    """Vertex enumeration: corner expansion for boxes, incremental
    double description for H-polytopes.

    Raises UnboundedSet / InfeasibleSet / DimensionTooLarge per the usual
    preconditions; the general path is limited to dim <= 8.
    """
    if isinstance(P, Box):
        if P.dim > 16:
            raise DimensionTooLarge(f"2^{P.dim} corners")
        if P.is_empty:
            raise InfeasibleSet("vertices of empty box")
        corners = np.array(list(itertools.product(*zip(P.lower, P.upper))))
        return VRep(corners)
    if P.dim > 8:
        raise DimensionTooLarge(f"double description refused for dim {P.dim}")
    if P.is_empty:
        raise InfeasibleSet("vertices of empty polytope")
    return _double_description(P)


def _double_description(P: HPolytope) -> VRep:
    """Insert half-spaces one at a time into a bounding box, keeping the
    vertex set current. Candidate crossings between cut-off and surviving
    vertices are accepted only when their active constraint rows span the
    full dimension, which filters edge midpoints in degenerate splits."""
    dim = P.dim
    lo = np.empty(dim)
    hi = np.empty(dim)
    for i in range(dim):
        hi[i] = support(P, _unit(dim, i))       # raises UnboundedSet if open
        lo[i] = -support(P, -_unit(dim, i))
    pad = 1.0 + 0.5 * float(np.max(hi - lo, initial=0.0))
    box = Box(lo - pad, hi + pad)
    V = vertices(box).vertices
    rows_A = [np.vstack([np.eye(dim), -np.eye(dim)])]
    rows_b = [np.concatenate([box.upper, -box.lower])]

    for a, beta in zip(P.A, P.b):
        norm = float(np.linalg.norm(a))
        if norm == 0.0:
            if beta < -_ACTIVE_TOL:
                raise InfeasibleSet("0.x <= negative")
            continue
        vals = V @ a - beta
        scale = max(1.0, norm)
        out = vals > _ACTIVE_TOL * scale
        if not np.any(out):
            rows_A.append(a.reshape(1, -1))
            rows_b.append(np.array([beta]))
            continue
        inside = ~out
        Vin = V[inside]
        Vout = V[out]
        cand = []
        for p, vp in zip(Vout, vals[out]):
            for q, vq in zip(Vin, vals[inside]):
                t = vp / (vp - vq) if vp != vq else 0.0
                cand.append(p + t * (q - p))
        rows_A.append(a.reshape(1, -1))
        rows_b.append(np.array([beta]))
        Acur = np.vstack(rows_A)
        bcur = np.concatenate(rows_b)
        newV = [Vin] if Vin.size else []
        kept = []
        for x in cand:
            resid = Acur @ x - bcur
            if np.any(resid > 1e-7):
                continue
            active = Acur[np.abs(resid) <= 1e-7]
            if np.linalg.matrix_rank(active, tol=1e-8) == dim:
                kept.append(x)
        if kept:
            newV.append(np.array(kept))
        if not newV:
            raise InfeasibleSet("half-space insertion emptied the set")
        V = _dedup(np.vstack(newV))
    return VRep(V)


def _dedup(V: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    out: list[np.ndarray] = []
    for x in V:
        if not any(np.linalg.norm(x - y) <= tol for y in out):
            out.append(x)
    return np.array(out)


# ---------------------------------------------------------------------------
# Lambda-contractive template
# ---------------------------------------------------------------------------


def contractive_set(phi_vertices, C: np.ndarray, lam: float,
                    max_iter: int = 200) -> np.ndarray:
    """Compute T with {x: Tx <= 1} lambda-contractive for every vertex
    dynamics x+ = Phi_j x, inside the constraint set {x: Cx <= 1}.

    Backward-reachability fixed point: S_0 = {Cx <= 1} and
    S_{k+1} = S_k  intersect  (for all j) {x: Phi_j x in lam S_k},
    with redundant rows pruned each pass; the iteration stops when the new
    pass adds nothing (checked by LP, S_k subset of S_{k+1}).

    Returns the row matrix T normalized so the offsets are all one. The
    result is verified post hoc: contractive_margin(T, phi) <= lam for all
    vertices, up to LP tolerance.
    """
    C = np.asarray(C, dtype=float)
    phis = [np.asarray(ph, dtype=float) for ph in phi_vertices]
    if not 0.0 <= lam < 1.0:
        raise ValueError("lambda must be in [0, 1)")
    for ph in phis:
        rho = float(np.abs(np.linalg.eigvals(ph)).max())
        if rho >= 1.0:
            raise UnstableVertex(f"vertex spectral radius {rho:.6g} >= 1")

    A = C.copy()
    b = np.ones(C.shape[0])
    for _ in range(max_iter):
        blocks_A = [A] + [A @ ph / lam for ph in phis]
        blocks_b = [b] * (1 + len(phis))
        A_new, b_new = prune_redundant(np.vstack(blocks_A), np.concatenate(blocks_b))
        # S_{k+1} subset of S_k holds by construction; equality iff every
        # row of the new system is already valid for S_k.
        converged = True
        for a_row, beta in zip(A_new, b_new):
            rep = solve_lp(LpProblem(c=-a_row, A_ineq=A, b_ineq=b))
            if rep.status is SolveStatus.Unbounded or (
                    rep.status is SolveStatus.Optimal
                    and -rep.objective > beta + _ACTIVE_TOL):
                converged = False
                break
        A, b = A_new, b_new
        if converged:
            if np.any(b <= _ACTIVE_TOL):
                raise NoConvergence("origin left the interior; template invalid")
            return A / b[:, None]
    raise NoConvergence(f"no fixed point within {max_iter} iterations")


def contractive_margin(T: np.ndarray, phi: np.ndarray) -> float:
    """max over rows i of max_{Tx <= 1} (T phi)_i x; lambda-contractive
    templates give a value <= lambda."""
    M = T @ phi
    worst = -np.inf
    ones = np.ones(T.shape[0])
    for row in M:
        rep = solve_lp(LpProblem(c=-row, A_ineq=T, b_ineq=ones))
        if rep.status is SolveStatus.Unbounded:
            return np.inf
        if rep.status is not SolveStatus.Optimal:
            raise NoConvergence(f"margin LP: {rep.status}")
        worst = max(worst, -rep.objective)
    return float(worst)
