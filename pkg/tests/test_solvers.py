"""Solver kernel tests: LP/QP reports with recomputed KKT residuals,
infeasibility certificates, the Lyapunov solve, and the LQR gain."""

import math

import numpy as np
import pytest

from sttmpc.geometry import NoConvergence
from sttmpc.solvers import (LpProblem, QpProblem, SolveStatus, UnstablePhi,
                            dlyap, farkas_residuals, lqr_gain, solve_lp,
                            solve_qp)


def brute_force_box_max(c, lower, upper):
    # support of a box in closed form: pick the best corner per coordinate
    return float(np.sum(np.where(c >= 0, c * upper, c * lower)))


def test_lp_simple_optimal():
    # min -x1 - x2 on the unit simplex
    p = LpProblem(c=[-1.0, -1.0], A_ineq=[[1.0, 1.0]], b_ineq=[1.0],
                  bounds=(0.0, None))
    rep = solve_lp(p)
    assert rep.status is SolveStatus.Optimal
    assert math.isclose(rep.objective, -1.0, abs_tol=1e-9)
    assert rep.max_residual() <= 1e-8


def test_lp_bounds_broadcast():
    p = LpProblem(c=[1.0, 2.0, 3.0], bounds=(0.0, 1.0))
    assert p.bounds == [(0.0, 1.0)] * 3
    rep = solve_lp(p)
    assert rep.status is SolveStatus.Optimal
    assert math.isclose(rep.objective, 0.0, abs_tol=1e-12)


def test_lp_bounds_length_mismatch():
    with pytest.raises(ValueError):
        LpProblem(c=[1.0, 2.0], bounds=[(0.0, 1.0)])


def test_lp_unbounded():
    rep = solve_lp(LpProblem(c=[-1.0], bounds=[(0.0, None)]))
    assert rep.status is SolveStatus.Unbounded


def test_lp_infeasible_with_certificate():
    # x <= -1 and x >= 0 cannot hold together
    p = LpProblem(c=[1.0], A_ineq=[[1.0]], b_ineq=[-1.0],
                  bounds=[(0.0, None)])
    rep = solve_lp(p)
    assert rep.status is SolveStatus.Infeasible
    assert rep.certificate is not None
    eq_resid, h_dot_y = farkas_residuals(p, rep.certificate["y"])
    assert eq_resid <= 1e-8
    assert h_dot_y < 0.0


def test_lp_matches_box_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(25):
        n = rng.integers(2, 6)
        lower = rng.normal(size=n) - 1.0
        upper = lower + rng.uniform(0.1, 2.0, size=n)
        c = rng.normal(size=n)
        rep = solve_lp(LpProblem(c=-c, bounds=list(zip(lower, upper))))
        assert rep.status is SolveStatus.Optimal
        assert math.isclose(-rep.objective,
                            brute_force_box_max(c, lower, upper),
                            abs_tol=1e-9)


def test_qp_analytic_minimum():
    # min (x1-1)^2 + (x2-2)^2, unconstrained interior minimum
    rep = solve_qp(QpProblem(P=2 * np.eye(2), q=[-2.0, -4.0],
                             A_ineq=[[1.0, 0.0]], b_ineq=[5.0]))
    assert rep.status is SolveStatus.Optimal
    np.testing.assert_allclose(rep.x, [1.0, 2.0], atol=1e-8)
    assert rep.max_residual() <= 1e-8


def test_qp_active_constraint_and_duals():
    # min x.x subject to x1 + x2 >= 2 -> x = (1,1), dual = 2
    rep = solve_qp(QpProblem(P=2 * np.eye(2), q=[0.0, 0.0],
                             A_ineq=[[-1.0, -1.0]], b_ineq=[-2.0]))
    assert rep.status is SolveStatus.Optimal
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-8)
    np.testing.assert_allclose(rep.duals_ineq, [2.0], atol=1e-6)


def test_qp_equality_constraint():
    rep = solve_qp(QpProblem(P=np.eye(3), q=np.zeros(3),
                             A_eq=[[1.0, 1.0, 1.0]], b_eq=[3.0]))
    assert rep.status is SolveStatus.Optimal
    np.testing.assert_allclose(rep.x, np.ones(3), atol=1e-8)


def test_qp_infeasible_detected():
    rep = solve_qp(QpProblem(P=np.eye(1), q=[0.0],
                             A_ineq=[[1.0], [-1.0]], b_ineq=[-2.0, 1.0]))
    assert rep.status is SolveStatus.Infeasible


def test_qp_kkt_random_battery():
    rng = np.random.default_rng(11)
    n_opt = 0
    for _ in range(30):
        n = int(rng.integers(2, 8))
        m = int(rng.integers(1, 2 * n))
        L = rng.normal(size=(n, n))
        P = L @ L.T + 0.1 * np.eye(n)
        q = rng.normal(size=n)
        A = rng.normal(size=(m, n))
        x_feas = rng.normal(size=n)
        b = A @ x_feas + rng.uniform(0.1, 1.0, size=m)
        rep = solve_qp(QpProblem(P=P, q=q, A_ineq=A, b_ineq=b))
        assert rep.status is SolveStatus.Optimal
        assert rep.max_residual() <= 1e-8
        n_opt += 1
    assert n_opt == 30


def test_dlyap_scalar_geometric_series():
    # sum of 0.25^k = 4/3
    P = dlyap(np.array([[0.5]]), np.array([[1.0]]))
    assert math.isclose(P[0, 0], 4.0 / 3.0, rel_tol=1e-12)


def test_dlyap_diagonal():
    P = dlyap(0.9 * np.eye(2), np.eye(2))
    np.testing.assert_allclose(P, np.eye(2) / 0.19, rtol=1e-12)


def test_dlyap_residual_random():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        Phi = rng.normal(size=(n, n))
        Phi *= 0.9 / max(1e-9, np.abs(np.linalg.eigvals(Phi)).max())
        A = rng.normal(size=(n, n))
        S = A @ A.T + np.eye(n)
        P = dlyap(Phi, S)
        assert np.max(np.abs(P - Phi.T @ P @ Phi - S)) <= 1e-10
        # P is the accumulated cost, so it dominates S
        assert np.all(np.linalg.eigvalsh(P - S) >= -1e-9)


def test_dlyap_unstable_raises():
    with pytest.raises(UnstablePhi):
        dlyap(np.array([[1.0]]), np.array([[1.0]]))


def test_lqr_gain_stabilizes_and_is_fixed_point():
    A = np.array([[1.1, 0.3], [0.0, 0.9]])
    B = np.array([[0.5], [1.0]])
    Q = np.eye(2)
    R = np.eye(1)
    K = lqr_gain(A, B, Q, R)
    cl = A + B @ K
    assert np.abs(np.linalg.eigvals(cl)).max() < 1.0
    # closed-loop cost matrix must reproduce K through one Riccati sweep
    P = dlyap(cl, Q + K.T @ R @ K)
    K_again = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    np.testing.assert_allclose(K, K_again, atol=1e-9)


def test_lqr_gain_unstabilizable_raises():
    # second state is unreachable and unstable
    A = np.diag([0.5, 1.5])
    B = np.array([[1.0], [0.0]])
    with pytest.raises(NoConvergence):
        lqr_gain(A, B, np.eye(2), np.eye(1))
