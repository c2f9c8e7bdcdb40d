"""Linear and convex quadratic programming with verified KKT residuals,
plus a dense discrete Lyapunov equation solver.

Every solve returns a :class:`SolveReport` whose residual fields are
recomputed here from the raw problem data, independently of the backend
that produced the iterates. Downstream logic (feasibility fallback,
acceptance tests) relies on the *status* being trustworthy, so infeasible
LPs carry a Farkas certificate and infeasible QPs are certified through a
phase-1 LP rather than inferred from solver stalls alone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


class SolveStatus(enum.Enum):
    Optimal = "optimal"
    Infeasible = "infeasible"
    Unbounded = "unbounded"
    MaxIter = "maxiter"


class UnstablePhi(ValueError):
    """Raised when dlyap is called with a matrix of spectral radius >= 1."""


def _as_matrix(M, ncols=None):
    if M is None:
        return np.zeros((0, ncols)) if ncols is not None else None
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M.reshape(1, -1)
    return M


def _as_vector(v, n=0):
    if v is None:
        return np.zeros(n)
    return np.atleast_1d(np.asarray(v, dtype=float))


@dataclass(frozen=True)
class LpProblem:
    """min c.x subject to A_ineq x <= b_ineq, A_eq x = b_eq, lb <= x <= ub.

    bounds is a list of (lo, hi) pairs with None for unbounded, or one
    such pair applied to every variable; default is fully free variables
    (note: scipy's own default is x >= 0).
    """

    c: np.ndarray
    A_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    bounds: list | tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "c", _as_vector(self.c))
        n = self.c.size
        object.__setattr__(self, "A_ineq", _as_matrix(self.A_ineq, n))
        object.__setattr__(self, "b_ineq", _as_vector(self.b_ineq, self.A_ineq.shape[0]))
        object.__setattr__(self, "A_eq", _as_matrix(self.A_eq, n))
        object.__setattr__(self, "b_eq", _as_vector(self.b_eq, self.A_eq.shape[0]))
        if self.bounds is not None:
            bl = list(self.bounds)
            if len(bl) == 2 and not isinstance(bl[0], (tuple, list)):
                bl = [(bl[0], bl[1])] * n
            if len(bl) != n:
                raise ValueError("bounds must match the number of variables")
            object.__setattr__(self, "bounds", bl)
        for arr in (self.c, self.A_ineq, self.b_ineq, self.A_eq, self.b_eq):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LpProblem data must be finite")

    @property
    def n(self) -> int:
        return self.c.size


@dataclass(frozen=True)
class QpProblem:
    """min 0.5 x.P.x + q.x subject to A_ineq x <= b_ineq, A_eq x = b_eq.

    P must be symmetric (1e-12) and positive semidefinite (eigenvalues
    above -1e-10); both are checked at construction.
    """

    P: np.ndarray
    q: np.ndarray
    A_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", _as_vector(self.q))
        n = self.q.size
        object.__setattr__(self, "A_ineq", _as_matrix(self.A_ineq, n))
        object.__setattr__(self, "b_ineq", _as_vector(self.b_ineq, self.A_ineq.shape[0]))
        object.__setattr__(self, "A_eq", _as_matrix(self.A_eq, n))
        object.__setattr__(self, "b_eq", _as_vector(self.b_eq, self.A_eq.shape[0]))
        if P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {P.shape}")
        scale = max(1.0, float(np.abs(P).max()))
        if np.abs(P - P.T).max() > 1e-12 * scale:
            raise ValueError("P must be symmetric to 1e-12")
        if np.linalg.eigvalsh(P).min() < -1e-10 * scale:
            raise ValueError("P must be positive semidefinite (eig > -1e-10)")

    @property
    def n(self) -> int:
        return self.q.size


@dataclass
class SolveReport:
    status: SolveStatus
    x: np.ndarray | None = None
    duals_ineq: np.ndarray | None = None
    duals_eq: np.ndarray | None = None
    objective: float = np.nan
    primal_residual: float = np.nan
    dual_residual: float = np.nan
    duality_gap: float = np.nan
    iterations: int = 0
    certificate: dict | None = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status is SolveStatus.Optimal

    def max_residual(self) -> float:
        return max(self.primal_residual, self.dual_residual, self.duality_gap)


# ---------------------------------------------------------------------------
# Linear programming
# ---------------------------------------------------------------------------

_HIGHS_OPTIONS = {
    "presolve": True,
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


def _fold_to_inequalities(p: LpProblem):
    """Rewrite all constraints (ineq, eq as two-sided, finite bounds) as
    G x <= h for Farkas certification."""
    n = p.n
    blocks_G = [p.A_ineq, p.A_eq, -p.A_eq]
    blocks_h = [p.b_ineq, p.b_eq, -p.b_eq]
    if p.bounds is not None:
        for i, (lo, hi) in enumerate(p.bounds):
            e = np.zeros(n)
            e[i] = 1.0
            if lo is not None and np.isfinite(lo):
                blocks_G.append(-e.reshape(1, -1))
                blocks_h.append(np.array([-lo]))
            if hi is not None and np.isfinite(hi):
                blocks_G.append(e.reshape(1, -1))
                blocks_h.append(np.array([hi]))
    return np.vstack(blocks_G), np.concatenate(blocks_h)


def farkas_residuals(p: LpProblem, y: np.ndarray):
    """Verify an infeasibility certificate: y >= 0, G.T y = 0, h.y < 0 for
    the folded inequality form of p. Returns (equality residual, h.y)."""
    G, h = _fold_to_inequalities(p)
    y = np.asarray(y, dtype=float)
    return float(np.abs(G.T @ y).max(initial=0.0)), float(h @ y)


def _farkas_certificate(p: LpProblem):
    """Search for y >= 0 with G.T y = 0, h.y = -1 (scaled); returns None if
    the auxiliary LP itself fails (no certificate found)."""
    G, h = _fold_to_inequalities(p)
    m = G.shape[0]
    if m == 0:
        return None
    # min h.y  s.t.  G.T y = 0, sum(y) = 1, y >= 0; value < 0 certifies.
    A_eq = np.vstack([G.T, np.ones((1, m))])
    b_eq = np.concatenate([np.zeros(G.shape[1]), [1.0]])
    res = linprog(h, A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * m,
                  method="highs", options=_HIGHS_OPTIONS)
    if res.status == 0 and res.fun < -1e-12:
        return {"y": res.x.copy(), "h_dot_y": float(res.fun)}
    return None


def solve_lp(p: LpProblem, tol: float = 1e-8, maxiter: int = 20000) -> SolveReport:
    """Solve an LP and return a report with recomputed KKT residuals.

    The backend is HiGHS (via scipy) with tightened feasibility tolerances;
    the report's residuals are recomputed here from (x, duals) so an
    Optimal status is a checkable claim, not a solver flag. Infeasible
    problems get a Farkas certificate in report.certificate.
    """
    n = p.n
    bounds = p.bounds if p.bounds is not None else [(None, None)] * n
    res = linprog(
        p.c,
        A_ub=p.A_ineq if p.A_ineq.size else None,
        b_ub=p.b_ineq if p.b_ineq.size else None,
        A_eq=p.A_eq if p.A_eq.size else None,
        b_eq=p.b_eq if p.b_eq.size else None,
        bounds=bounds,
        method="highs",
        options=dict(_HIGHS_OPTIONS, maxiter=maxiter),
    )
    if res.status == 2:
        return SolveReport(status=SolveStatus.Infeasible,
                           certificate=_farkas_certificate(p),
                           message=res.message)
    if res.status == 3:
        return SolveReport(status=SolveStatus.Unbounded, message=res.message)
    if res.status != 0:
        return SolveReport(status=SolveStatus.MaxIter, iterations=int(res.nit),
                           message=res.message)

    x = np.asarray(res.x, dtype=float)
    # scipy marginals are objective sensitivities to the RHS; recover the
    # Lagrangian multipliers of  L = c.x + lam.(Ax-b) + nu.(Aeq x - beq)
    #                                 - mu_lo.(x-lb) + mu_hi.(x-ub)
    lam = -np.asarray(res.ineqlin.marginals) if p.A_ineq.size else np.zeros(0)
    nu = -np.asarray(res.eqlin.marginals) if p.A_eq.size else np.zeros(0)
    mu_lo = np.asarray(res.lower.marginals, dtype=float)
    mu_hi = -np.asarray(res.upper.marginals, dtype=float)
    lam = np.maximum(lam, 0.0)
    mu_lo = np.maximum(mu_lo, 0.0)
    mu_hi = np.maximum(mu_hi, 0.0)

    lb = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    ub = np.array([np.inf if b[1] is None else b[1] for b in bounds])
    pr = 0.0
    if p.A_ineq.size:
        pr = max(pr, float((p.A_ineq @ x - p.b_ineq).max(initial=0.0)))
    if p.A_eq.size:
        pr = max(pr, float(np.abs(p.A_eq @ x - p.b_eq).max(initial=0.0)))
    pr = max(pr, float(np.maximum(lb - x, 0.0).max(initial=0.0)))
    pr = max(pr, float(np.maximum(x - ub, 0.0).max(initial=0.0)))

    grad = p.c.copy()
    if p.A_ineq.size:
        grad += p.A_ineq.T @ lam
    if p.A_eq.size:
        grad += p.A_eq.T @ nu
    grad -= mu_lo
    grad += mu_hi
    dr = float(np.abs(grad).max(initial=0.0))

    dual_obj = 0.0
    if p.A_ineq.size:
        dual_obj -= lam @ p.b_ineq
    if p.A_eq.size:
        dual_obj -= nu @ p.b_eq
    finite_lo = np.isfinite(lb)
    finite_hi = np.isfinite(ub)
    dual_obj += mu_lo[finite_lo] @ lb[finite_lo]
    dual_obj -= mu_hi[finite_hi] @ ub[finite_hi]
    obj = float(p.c @ x)
    gap = abs(obj - dual_obj)

    return SolveReport(
        status=SolveStatus.Optimal,
        x=x,
        duals_ineq=lam,
        duals_eq=nu,
        objective=obj,
        primal_residual=pr,
        dual_residual=dr,
        duality_gap=gap,
        iterations=int(res.nit),
    )


# ---------------------------------------------------------------------------
# Quadratic programming: dense Mehrotra predictor-corrector interior point
# ---------------------------------------------------------------------------


def _qp_residuals(p: QpProblem, x, y, z):
    """(primal, dual, gap) residuals at the triple; z must be >= 0."""
    pr = 0.0
    comp = 0.0
    if p.A_ineq.size:
        slack = p.b_ineq - p.A_ineq @ x
        pr = max(pr, float((-slack).max(initial=0.0)))
        comp = float(np.abs(z * slack).max(initial=0.0))
    if p.A_eq.size:
        pr = max(pr, float(np.abs(p.A_eq @ x - p.b_eq).max(initial=0.0)))
    grad = p.P @ x + p.q
    if p.A_ineq.size:
        grad += p.A_ineq.T @ z
    if p.A_eq.size:
        grad += p.A_eq.T @ y
    dr = float(np.abs(grad).max(initial=0.0))
    return pr, dr, comp


def _qp_polish(p: QpProblem, x, y, z, s):
    """Solve the equality-constrained KKT system on the estimated active set
    to sharpen complementarity; returns a candidate (x, y, z) or None."""
    n, mi, me = p.n, p.A_ineq.shape[0], p.A_eq.shape[0]
    act = np.where(s <= z)[0] if mi else np.array([], dtype=int)
    G_act = p.A_ineq[act]
    na = len(act)
    K = np.zeros((n + me + na, n + me + na))
    K[:n, :n] = p.P
    rhs = np.concatenate([-p.q, p.b_eq, p.b_ineq[act]])
    if me:
        K[:n, n:n + me] = p.A_eq.T
        K[n:n + me, :n] = p.A_eq
    if na:
        K[:n, n + me:] = G_act.T
        K[n + me:, :n] = G_act
    try:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    except np.linalg.LinAlgError:
        return None
    xs = sol[:n]
    ys = sol[n:n + me]
    zs = np.zeros(mi)
    z_act = sol[n + me:]
    if np.any(z_act < -1e-9):
        return None
    zs[act] = np.maximum(z_act, 0.0)
    return xs, ys, zs


def solve_qp(p: QpProblem, tol: float = 1e-8, maxiter: int = 100) -> SolveReport:
    """Solve a convex QP with a dense predictor-corrector interior point
    method, then an active-set polish step.

    Optimality is declared only after the polished (or final) iterate
    passes recomputed KKT residuals below tol. When the iteration stalls
    with a large primal residual, a phase-1 LP certifies infeasibility; an
    infeasible status therefore always carries an LP certificate.
    """
    n, mi, me = p.n, p.A_ineq.shape[0], p.A_eq.shape[0]

    if mi == 0:
        # Equality-only (or unconstrained) convex QP: one KKT solve.
        K = np.zeros((n + me, n + me))
        K[:n, :n] = p.P
        if me:
            K[:n, n:] = p.A_eq.T
            K[n:, :n] = p.A_eq
        rhs = np.concatenate([-p.q, p.b_eq])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        x, y = sol[:n], sol[n:]
        pr, dr, comp = _qp_residuals(p, x, y, np.zeros(0))
        if max(pr, dr) > max(tol, 1e-6):
            # lstsq residual means no stationary point: unbounded below.
            return SolveReport(status=SolveStatus.Unbounded)
        return SolveReport(status=SolveStatus.Optimal, x=x, duals_eq=y,
                           duals_ineq=np.zeros(0),
                           objective=float(0.5 * x @ p.P @ x + p.q @ x),
                           primal_residual=pr, dual_residual=dr,
                           duality_gap=comp, iterations=1)

    G, h = p.A_ineq, p.b_ineq
    A, b = p.A_eq, p.b_eq

    x = np.zeros(n)
    if me:
        x, *_ = np.linalg.lstsq(A, b, rcond=None)
    s = np.maximum(1.0, h - G @ x)
    z = np.ones(mi)
    y = np.zeros(me)

    scale = max(1.0, float(np.abs(h).max(initial=0.0)),
                float(np.abs(p.q).max(initial=0.0)))
    stall_pr = np.inf
    stall_count = 0

    for it in range(1, maxiter + 1):
        rd = p.P @ x + p.q + G.T @ z + (A.T @ y if me else 0.0)
        rp_eq = (A @ x - b) if me else np.zeros(0)
        rp_in = G @ x + s - h
        mu = float(s @ z) / mi

        pr, dr, comp = _qp_residuals(p, x, y, z)
        if max(pr, dr, comp) < tol:
            break

        # Infeasibility watch: primal residual refusing to fall.
        if pr > 1e-7 * scale:
            if pr > 0.9 * stall_pr:
                stall_count += 1
            else:
                stall_count = 0
            stall_pr = min(stall_pr, pr)
            if stall_count >= 8 or (it == maxiter):
                ph1 = solve_lp(LpProblem(c=np.zeros(n), A_ineq=G, b_ineq=h,
                                         A_eq=A if me else None,
                                         b_eq=b if me else None))
                if ph1.status is SolveStatus.Infeasible:
                    return SolveReport(status=SolveStatus.Infeasible,
                                       certificate=ph1.certificate,
                                       iterations=it,
                                       message="phase-1 LP certified infeasible")
                stall_count = 0

        D = z / np.maximum(s, 1e-300)
        M = p.P + (G.T * D) @ G
        dim = n + me
        K = np.zeros((dim, dim))
        K[:n, :n] = M
        if me:
            K[:n, n:] = A.T
            K[n:, :n] = A

        def kkt_solve(r_comp):
            rhs = np.empty(dim)
            rhs[:n] = -rd - G.T @ ((z * rp_in - r_comp) / np.maximum(s, 1e-300))
            if me:
                rhs[n:] = -rp_eq
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                Kr = K + 1e-11 * np.eye(dim)
                sol = np.linalg.solve(Kr, rhs)
            dx = sol[:n]
            dy = sol[n:]
            ds = -rp_in - G @ dx
            dz = (-r_comp - z * ds) / np.maximum(s, 1e-300)
            return dx, dy, ds, dz

        def max_step(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return float(min(1.0, np.min(-v[neg] / dv[neg])))

        # predictor
        r_comp_aff = s * z
        dxa, dya, dsa, dza = kkt_solve(r_comp_aff)
        ap = max_step(s, dsa)
        ad = max_step(z, dza)
        mu_aff = float((s + ap * dsa) @ (z + ad * dza)) / mi
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # corrector
        r_comp = s * z + dsa * dza - sigma * mu
        dx, dy, ds, dz = kkt_solve(r_comp)
        frac = 0.995 if mu > 1e-10 else 0.9999
        ap = frac * max_step(s, ds)
        ad = frac * max_step(z, dz)
        x = x + ap * dx
        s = s + ap * ds
        y = y + ad * dy
        z = z + ad * dz

        if not np.all(np.isfinite(x)) or float(np.abs(x).max()) > 1e13:
            return SolveReport(status=SolveStatus.Unbounded, iterations=it,
                               message="iterates diverged")
    else:
        it = maxiter

    polished = _qp_polish(p, x, y, z, s)
    if polished is not None:
        xs, ys, zs = polished
        pr2, dr2, comp2 = _qp_residuals(p, xs, ys, zs)
        pr1, dr1, comp1 = _qp_residuals(p, x, y, z)
        if max(pr2, dr2, comp2) <= max(pr1, dr1, comp1):
            x, y, z = xs, ys, zs

    pr, dr, comp = _qp_residuals(p, x, y, z)
    status = SolveStatus.Optimal if max(pr, dr, comp) <= tol else SolveStatus.MaxIter
    return SolveReport(
        status=status,
        x=x,
        duals_ineq=z,
        duals_eq=y,
        objective=float(0.5 * x @ p.P @ x + p.q @ x),
        primal_residual=pr,
        dual_residual=dr,
        duality_gap=comp,
        iterations=it,
    )


# ---------------------------------------------------------------------------
# Discrete Lyapunov equation
# ---------------------------------------------------------------------------


def dlyap(Phi: np.ndarray, S: np.ndarray, rho_tol: float = 1e-9) -> np.ndarray:
    """Solve P - Phi.T P Phi = S for symmetric PSD S and stable Phi.

    Uses the vectorized Kronecker form (I - kron(Phi.T, Phi.T)) vec(P) =
    vec(S), solved densely; fine for the state dimensions used here.

    Raises UnstablePhi when the spectral radius of Phi is >= 1 - rho_tol.
    """
    Phi = np.asarray(Phi, dtype=float)
    S = np.asarray(S, dtype=float)
    n = Phi.shape[0]
    if Phi.shape != (n, n) or S.shape != (n, n):
        raise ValueError("Phi and S must be square and same size")
    rho = float(np.abs(np.linalg.eigvals(Phi)).max())
    if rho >= 1.0 - rho_tol:
        raise UnstablePhi(f"spectral radius {rho:.6g} >= 1 - {rho_tol:g}")
    # vec(Phi.T P Phi) = kron(Phi.T, Phi.T) vec(P)
    Kron = np.eye(n * n) - np.kron(Phi.T, Phi.T)
    P = np.linalg.solve(Kron, S.reshape(-1)).reshape(n, n)
    return 0.5 * (P + P.T)


def lqr_gain(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
             tol: float = 1e-12, max_iter: int = 10000) -> np.ndarray:
    """Infinite-horizon LQR gain K with u = K x (closed loop A + B K),
    from the fixed point of the Riccati recursion.

    Raises NoConvergence if the recursion has not settled after max_iter
    sweeps (e.g. unstabilizable pair).
    """
    from .geometry import NoConvergence

    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = -np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + K.T @ R @ K + (A + B @ K).T @ P @ (A + B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > 1e12:
            raise NoConvergence("Riccati recursion diverged")
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P))):
            return K
        P = P_next
    raise NoConvergence("Riccati recursion did not settle")
