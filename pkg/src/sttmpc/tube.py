"""Polytopic tube MPC pieces: the offline template design, the per-step
vertex matrices, noise bounds, terminal cost, the condensed QP, and the
fallback rule that swaps in the freshest parameter set for which the
problem is feasible.

Tube cross sections are {x: Tx <= alpha_k} with a shared template T and
per-step offsets as decision variables. One nonnegative matrix per
uncertainty vertex propagates the offsets through the vertex dynamics;
a single nonnegative matrix maps offsets into the state-input
constraints. Disturbance and excitation enter only through tightening
vectors computed from support functions.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .estimation import Parametrization
from .geometry import Box, contractive_margin, contractive_set, support
from .solvers import (LpProblem, QpProblem, SolveReport, SolveStatus, dlyap,
                      solve_lp, solve_qp)

_EQ_TOL = 1e-8


class RowInfeasible(ValueError):
    """A row LP for a tube matrix had no feasible point; the template T
    does not support these constraints/dynamics."""

    def __init__(self, row: int, what: str):
        self.row = row
        super().__init__(f"{what}: row {row} infeasible")


class AllInfeasible(RuntimeError):
    """Every stored parameter set left the problem infeasible; violates
    the recursive-feasibility contract given a feasible start."""


@dataclass(frozen=True)
class TubeDesign:
    """Everything fixed offline: template T, constraint map H_c, the
    contraction factor, feedback gain, constraint matrices, horizon and
    cost weights."""

    T: np.ndarray
    H_c: np.ndarray
    lam: float
    K: np.ndarray
    F: np.ndarray
    G: np.ndarray
    N: int
    Q: np.ndarray
    R: np.ndarray

    @property
    def d_alpha(self) -> int:
        return self.T.shape[0]

    @property
    def d_c(self) -> int:
        return self.F.shape[0]

    @property
    def d_x(self) -> int:
        return self.T.shape[1]

    @property
    def d_u(self) -> int:
        return self.G.shape[1]


def design_tube(par: Parametrization, theta_vertices: np.ndarray,
                F: np.ndarray, G: np.ndarray, K: np.ndarray, lam: float,
                N: int, Q: np.ndarray, R: np.ndarray,
                max_iter: int = 200) -> TubeDesign:
    """Offline design: synthesize the contractive template over the
    closed-loop vertex dynamics of the initial parameter set, verify the
    contraction by LP, and compute H_c."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    phis = [par.phi(th, K) for th in np.atleast_2d(theta_vertices)]
    C = F + G @ K
    T = contractive_set(phis, C, lam, max_iter=max_iter)
    worst = max(contractive_margin(T, ph) for ph in phis)
    if worst > lam + 1e-6:
        raise RowInfeasible(-1, f"template not {lam}-contractive ({worst})")
    H_c = compute_Hc(T, F, G, K)
    return TubeDesign(T=T, H_c=H_c, lam=float(lam), K=K, F=F, G=G, N=int(N),
                      Q=np.asarray(Q, dtype=float), R=np.asarray(R, dtype=float))


# ---------------------------------------------------------------------------
# Tube matrices
# ---------------------------------------------------------------------------


class _BasisEnum:
    """Exact minimizer of 1.h s.t. h.T T = row, h >= 0 by enumerating
    basic solutions.

    Any solvable instance has an optimum supported on at most rank(T)
    columns of T.T, so scanning all index subsets up to that size is
    complete. Subset pseudo-inverses are precomputed from T once; a solve
    is then a few batched matrix products, which is what makes the
    per-step tube matrix refresh cheap. Candidates that fail to reproduce
    the row or go negative are discarded; no candidate at all means the
    caller should fall back to the LP for a certified verdict.
    """

    def __init__(self, T: np.ndarray):
        self.T = T
        d_alpha = T.shape[0]
        rank = int(np.linalg.matrix_rank(T))
        self.blocks = []
        for r in range(1, rank + 1):
            idx = np.array(list(itertools.combinations(range(d_alpha), r)))
            cols = T[idx].transpose(0, 2, 1)
            self.blocks.append((idx, np.linalg.pinv(cols)))

    def solve(self, row: np.ndarray) -> np.ndarray | None:
        best = None
        best_cost = np.inf
        scale = max(1.0, float(np.max(np.abs(row))))
        for idx, pinv in self.blocks:
            hs = np.einsum("nrd,d->nr", pinv, row)
            recon = np.einsum("nr,nrd->nd", hs, self.T[idx])
            ok = ((np.max(np.abs(recon - row), axis=1) <= 1e-9 * scale)
                  & (hs.min(axis=1) >= -1e-11))
            if not ok.any():
                continue
            costs = np.where(ok, hs.sum(axis=1), np.inf)
            k = int(np.argmin(costs))
            if costs[k] < best_cost:
                best_cost = costs[k]
                best = np.zeros(self.T.shape[0])
                best[idx[k]] = np.maximum(hs[k], 0.0)
        return best


_ENUM_SUBSET_CAP = 20000


@lru_cache(maxsize=64)
def _basis_enum(t_bytes: bytes, d_alpha: int, d_x: int) -> _BasisEnum | None:
    T = np.frombuffer(t_bytes, dtype=float).reshape(d_alpha, d_x)
    rank = int(np.linalg.matrix_rank(T))
    total = sum(len(list(itertools.combinations(range(d_alpha), r)))
                for r in range(1, rank + 1))
    if total > _ENUM_SUBSET_CAP:
        return None
    return _BasisEnum(T)


def _row_cover_lp(T: np.ndarray, row: np.ndarray, i: int,
                  what: str) -> np.ndarray:
    rep = solve_lp(LpProblem(c=np.ones(T.shape[0]), A_eq=T.T, b_eq=row,
                             bounds=(0.0, None)))
    if rep.status is SolveStatus.Infeasible:
        raise RowInfeasible(i, what)
    if rep.status is not SolveStatus.Optimal:
        raise RuntimeError(f"{what}: row {i} solver status {rep.status}")
    return np.maximum(rep.x, 0.0)


def _min_row_cover(T: np.ndarray, target: np.ndarray, what: str) -> np.ndarray:
    """Stack, per target row, the minimizer of 1.h s.t. h.T T = row, h >= 0."""
    T = np.ascontiguousarray(T, dtype=float)
    enum = _basis_enum(T.tobytes(), *T.shape)
    out = np.empty((target.shape[0], T.shape[0]))
    for i, row in enumerate(target):
        h = enum.solve(row) if enum is not None else None
        if h is None:
            h = _row_cover_lp(T, row, i, what)
        if np.max(np.abs(T.T @ h - row)) > _EQ_TOL:
            raise RowInfeasible(i, f"{what}: equality residual too large")
        out[i] = h
    return out


def compute_Hc(T: np.ndarray, F: np.ndarray, G: np.ndarray,
               K: np.ndarray) -> np.ndarray:
    """Nonnegative H_c with H_c T = F + GK, rows of minimal mass."""
    return _min_row_cover(T, F + G @ K, "H_c")


def compute_Hj(T: np.ndarray, phi_j: np.ndarray) -> np.ndarray:
    """Nonnegative H with H T = T Phi_j, rows of minimal mass."""
    return _min_row_cover(T, T @ phi_j, "H_vertex")


def h_identity_residual(H: np.ndarray, T: np.ndarray,
                        target: np.ndarray) -> float:
    """max |H T - target|, the defining identity of the tube matrices."""
    return float(np.max(np.abs(H @ T - target)))


@dataclass(frozen=True)
class VertexData:
    """Per-vertex data for the current parameter set: the vertices
    themselves, their closed-loop and input matrices, and the tube
    propagation matrices."""

    thetas: np.ndarray
    phis: np.ndarray
    Bs: np.ndarray
    Hs: np.ndarray

    @property
    def m(self) -> int:
        return self.thetas.shape[0]

    def worst_identity_residual(self, T: np.ndarray) -> float:
        worst = 0.0
        for phi, H in zip(self.phis, self.Hs):
            worst = max(worst, h_identity_residual(H, T, T @ phi))
        return worst


def vertex_data(design: TubeDesign, par: Parametrization,
                theta_vertices: np.ndarray) -> VertexData:
    """Assemble VertexData for a vertex list of the parameter set."""
    thetas = np.atleast_2d(np.asarray(theta_vertices, dtype=float))
    phis = np.stack([par.phi(th, design.K) for th in thetas])
    Bs = np.stack([par.B(th) for th in thetas])
    Hs = np.stack([compute_Hj(design.T, ph) for ph in phis])
    return VertexData(thetas=thetas, phis=phis, Bs=Bs, Hs=Hs)


class VertexCache:
    """Memoizes vertex_data on the vertex coordinates, so repeated solves
    against an unchanged parameter set skip the row LPs."""

    def __init__(self, design: TubeDesign, par: Parametrization):
        self.design = design
        self.par = par
        self._store: dict[bytes, VertexData] = {}

    def get(self, theta_vertices: np.ndarray) -> VertexData:
        key = np.ascontiguousarray(theta_vertices).tobytes()
        hit = self._store.get(key)
        if hit is None:
            hit = vertex_data(self.design, self.par, theta_vertices)
            self._store[key] = hit
        return hit


# ---------------------------------------------------------------------------
# Noise bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseBounds:
    """Tightening vectors: w_bar on the tube recursion (disturbance plus
    the state-space image of the excitation), zeta_bar on the constraint
    rows (excitation through G), and the worst-case input-matrix operator
    norm, kept as metadata."""

    w_bar: np.ndarray
    zeta_bar: np.ndarray
    B_bar: float


def b_bar(theta_vertices: np.ndarray, par: Parametrization) -> float:
    """max over vertices of the spectral norm of B(theta); the max over
    the whole polytope is attained at a vertex by convexity."""
    thetas = np.atleast_2d(np.asarray(theta_vertices, dtype=float))
    if thetas.shape[0] == 0:
        raise ValueError("empty vertex list")
    return float(max(np.linalg.norm(par.B(th), ord=2) for th in thetas))


def noise_bounds(T: np.ndarray, G: np.ndarray, W: Box, sigma_t: float,
                 Bs: np.ndarray) -> NoiseBounds:
    """Row-wise support values of the tightening sets.

    The excitation enters the state as B(theta) zeta with zeta in the
    ball of radius 3 sigma_t; per tube row the worst case over the
    parameter polytope is convex in theta, hence attained at a vertex:
    [w_exc]_i = 3 sigma_t max_j ||(T B_j)_i||. w_bar adds that to the
    disturbance support; zeta_bar pushes the excitation box through G.
    The per-coordinate box of half-width 3 sigma_t B_bar would also be a
    valid image bound but is too loose to keep the far-field problem
    feasible; B_bar is retained as metadata.
    """
    if sigma_t < 0:
        raise ValueError("sigma_t must be >= 0")
    Bs = np.asarray(Bs, dtype=float)
    if Bs.ndim == 2:
        Bs = Bs[None]
    d_u = G.shape[1]
    TB = np.einsum("ak,jku->jau", T, Bs)
    exc = 3.0 * sigma_t * np.linalg.norm(TB, axis=2).max(axis=0)
    z_in = Box(-3.0 * sigma_t * np.ones(d_u), 3.0 * sigma_t * np.ones(d_u))
    w_rows = np.array([support(W, row) for row in T]) + exc
    z_rows = np.array([support(z_in, row) for row in G])
    B_bar = float(max(np.linalg.norm(Bj, ord=2) for Bj in Bs))
    return NoiseBounds(w_bar=w_rows, zeta_bar=z_rows, B_bar=B_bar)


def terminal_cost(theta: np.ndarray, design: TubeDesign,
                  par: Parametrization) -> np.ndarray:
    """Quadratic terminal weight from the closed-loop Lyapunov equation
    P - Phi' P Phi = Q + K' R K; raises UnstablePhi outside the
    stabilized region."""
    phi = par.phi(theta, design.K)
    S = design.Q + design.K.T @ design.R @ design.K
    return dlyap(phi, S)


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TubeProblem:
    """The condensed QP plus the bookkeeping to read it back: row tags
    identify each constraint block, x_base/x_maps reconstruct the nominal
    trajectory from the input moves, offset restores the constant cost
    term dropped by the QP form."""

    qp: QpProblem
    row_tags: list
    N: int
    m: int
    d_u: int
    d_alpha: int
    x_base: np.ndarray
    x_maps: np.ndarray
    offset: float
    theta: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.qp.q.size

    def split(self, z: np.ndarray):
        """Decision vector -> (v as N x d_u, alpha as (N+1) x d_alpha)."""
        nv = self.N * self.d_u
        v = z[:nv].reshape(self.N, self.d_u)
        alpha = z[nv:].reshape(self.N + 1, self.d_alpha)
        return v, alpha

    def join(self, v: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        return np.concatenate([np.ravel(v), np.ravel(alpha)])

    def nominal_states(self, v: np.ndarray) -> np.ndarray:
        """Predicted nominal trajectory for input moves v (N x d_u)."""
        vflat = np.ravel(v)
        return self.x_base + self.x_maps @ vflat

    def value(self, objective: float) -> float:
        return objective + self.offset

    def violation(self, z: np.ndarray) -> float:
        """Largest constraint violation at z (negative means slack)."""
        return float(np.max(self.qp.A_ineq @ z - self.qp.b_ineq))

    def violations_by_tag(self, z: np.ndarray) -> dict:
        resid = self.qp.A_ineq @ z - self.qp.b_ineq
        out: dict = {}
        for r, tag in zip(resid, self.row_tags):
            kind = tag[0]
            out[kind] = max(out.get(kind, -np.inf), float(r))
        return out


def build_problem(x_t: np.ndarray, theta_t: np.ndarray, vdata: VertexData,
                  noise: NoiseBounds, design: TubeDesign, P: np.ndarray,
                  par: Parametrization) -> TubeProblem:
    """Assemble the condensed tube QP at state x_t.

    Decision variables are the input moves v_0..v_{N-1} followed by the
    tube offsets alpha_0..alpha_N; the nominal states are substituted out
    through the prediction model at theta_t. Constraint blocks: the
    initial offset covers x_t; each vertex propagates offsets one step
    with the tightened recursion; the state-input rows bound H_c alpha_k
    + G v_k; the terminal offset is invariant per vertex and satisfies
    the constraint rows on its own.
    """
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
    N, m = design.N, vdata.m
    d_u, d_alpha, d_c, d_x = design.d_u, design.d_alpha, design.d_c, design.d_x
    nv = N * d_u
    na = (N + 1) * d_alpha
    n = nv + na

    phi_n = par.phi(theta_t, design.K)
    B_n = par.B(theta_t)

    # nominal trajectory x_k = base_k + M_k v, built by one-step recursion
    x_base = np.empty((N + 1, d_x))
    x_maps = np.zeros((N + 1, d_x, nv))
    x_base[0] = x_t
    for k in range(N):
        x_base[k + 1] = phi_n @ x_base[k]
        x_maps[k + 1] = phi_n @ x_maps[k]
        x_maps[k + 1][:, k * d_u:(k + 1) * d_u] += B_n

    # objective sum_k x_k' Q x_k + v_k' R v_k + x_N' P x_N over v only
    Hq = np.zeros((nv, nv))
    cq = np.zeros(nv)
    offset = 0.0
    for k in range(N + 1):
        Wk = design.Q if k < N else P
        Mk = x_maps[k]
        bk = x_base[k]
        Hq += Mk.T @ Wk @ Mk
        cq += Mk.T @ Wk @ bk
        offset += float(bk @ Wk @ bk)
    for k in range(N):
        sl = slice(k * d_u, (k + 1) * d_u)
        Hq[sl, sl] += design.R

    P_qp = np.zeros((n, n))
    P_qp[:nv, :nv] = Hq + Hq.T            # = 2*Hq symmetrized
    q_qp = np.zeros(n)
    q_qp[:nv] = 2.0 * cq

    def a_slice(k):
        return slice(nv + k * d_alpha, nv + (k + 1) * d_alpha)

    def v_slice(k):
        return slice(k * d_u, (k + 1) * d_u)

    rows = []
    rhs = []
    tags = []

    def add(block, b, tag):
        rows.append(block)
        rhs.append(b)
        tags.extend([tag] * block.shape[0])

    # initial offset covers the measured state: -alpha_0 <= -T x_t
    blk = np.zeros((d_alpha, n))
    blk[:, a_slice(0)] = -np.eye(d_alpha)
    add(blk, -design.T @ x_t, ("initial", None, None))

    # offset recursion, one block per vertex and step:
    # H_j a_k - a_{k+1} + T B_j v_k <= -w_bar
    for k in range(N):
        for j in range(m):
            blk = np.zeros((d_alpha, n))
            blk[:, a_slice(k)] = vdata.Hs[j]
            blk[:, a_slice(k + 1)] = -np.eye(d_alpha)
            blk[:, v_slice(k)] = design.T @ vdata.Bs[j]
            add(blk, -noise.w_bar, ("tube", j, k))

    # state-input rows: H_c a_k + G v_k <= 1 - zeta_bar
    for k in range(N):
        blk = np.zeros((d_c, n))
        blk[:, a_slice(k)] = design.H_c
        blk[:, v_slice(k)] = design.G
        add(blk, np.ones(d_c) - noise.zeta_bar, ("constraint", None, k))

    # terminal offset: invariant per vertex, constraint rows hold at v=0
    for j in range(m):
        blk = np.zeros((d_alpha, n))
        blk[:, a_slice(N)] = vdata.Hs[j] - np.eye(d_alpha)
        add(blk, -noise.w_bar, ("terminal_tube", j, None))
    blk = np.zeros((d_c, n))
    blk[:, a_slice(N)] = design.H_c
    add(blk, np.ones(d_c) - noise.zeta_bar, ("terminal_constraint", None, None))

    qp = QpProblem(P=P_qp, q=q_qp, A_ineq=np.vstack(rows),
                   b_ineq=np.concatenate(rhs))
    return TubeProblem(qp=qp, row_tags=tags, N=N, m=m, d_u=d_u,
                       d_alpha=d_alpha, x_base=x_base,
                       x_maps=x_maps.reshape(N + 1, d_x, nv),
                       offset=offset, theta=np.asarray(theta_t, dtype=float))


# ---------------------------------------------------------------------------
# Solving with fallback
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Instance:
    """A time-stamped parameter set the controller may solve against:
    the point estimate, the set it came from, and the vertex data."""

    tau: int
    theta: np.ndarray
    Theta: object
    vdata: VertexData


@dataclass
class ControlOutput:
    """Solved tube problem: optimal moves and offsets, the optimal value
    with the constant term restored, which parameter set was used, and
    whether it was the current one."""

    v_star: np.ndarray
    alpha_star: np.ndarray
    value: float
    rho_used: int
    feasible_current: bool
    problem: TubeProblem
    report: SolveReport
    instance: Instance


def problem_dump(problem: TubeProblem, report: SolveReport) -> dict:
    """JSON-serializable record of a problem instance and its solver
    outcome, for infeasible or anomalous steps."""
    tag_counts: dict = {}
    for tag in problem.row_tags:
        tag_counts[tag[0]] = tag_counts.get(tag[0], 0) + 1
    return {
        "n_vars": problem.n_vars,
        "n_rows": int(problem.qp.b_ineq.size),
        "horizon": problem.N,
        "n_vertices": problem.m,
        "blocks": tag_counts,
        "theta": problem.theta.tolist(),
        "status": report.status.name,
        "primal_residual": report.primal_residual,
        "dual_residual": report.dual_residual,
        "duality_gap": report.duality_gap,
        "iterations": report.iterations,
        "message": report.message,
    }


def solve_with_fallback(x_t: np.ndarray, current: Instance,
                        history: list, noise: NoiseBounds,
                        design: TubeDesign, par: Parametrization,
                        tol: float = 1e-8) -> ControlOutput:
    """Solve against the current parameter set; on infeasibility walk the
    stored sets newest first until one works.

    history holds every instance that has solved feasibly before, so the
    guarantee chain (the set used last step stays feasible) is always in
    the list. On a current-set success the instance is appended for the
    next step; fallback successes are already present. Raises
    AllInfeasible with a dump of the attempts when nothing works, which
    breaks the feasible-start contract.
    """
    candidates = [current] + sorted(history, key=lambda c: -c.tau)
    attempts = []
    seen = set()
    for cand in candidates:
        if cand.tau in seen:
            continue
        seen.add(cand.tau)
        P = terminal_cost(cand.theta, design, par)
        problem = build_problem(x_t, cand.theta, cand.vdata, noise, design,
                                P, par)
        report = solve_qp(problem.qp, tol=tol)
        if report.status is SolveStatus.Optimal:
            v, alpha = problem.split(report.x)
            if cand is current:
                history.append(current)
            return ControlOutput(v_star=v, alpha_star=alpha,
                                 value=problem.value(report.objective),
                                 rho_used=cand.tau,
                                 feasible_current=cand is current,
                                 problem=problem, report=report,
                                 instance=cand)
        attempts.append(problem_dump(problem, report))
    raise AllInfeasible(json.dumps({"x_t": list(map(float, np.atleast_1d(x_t))),
                                    "attempts": attempts}, indent=2))


def control_input(x_t: np.ndarray, v0: np.ndarray, zeta: np.ndarray,
                  K: np.ndarray) -> np.ndarray:
    """Applied input: feedback plus the first move plus excitation."""
    return (np.atleast_2d(K) @ np.atleast_1d(x_t)
            + np.atleast_1d(v0) + np.atleast_1d(zeta))
