"""Least-squares identification, confidence schedules, and the
set-membership update."""

import math

import numpy as np
import pytest

from sttmpc.estimation import (EstimatorState, Parametrization, Schedule,
                               UncertaintyState, ball_in_set, epsilon,
                               lse_point, lse_update, matrix_norm_dist,
                               pe_noise, sigma_t, t_star,
                               update_uncertainty)
from sttmpc.geometry import Box, volume

# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def test_schedule_defaults():
    sch = Schedule(delta=0.1, sigma=0.01)
    assert sch.alpha == 0.5
    assert sch.c1 == 2.0
    assert sch.c2 == 0.3
    assert sch.c3 == 1.2e-4


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(delta=0.0, sigma=0.01)
    with pytest.raises(ValueError):
        Schedule(delta=1.0, sigma=0.01)
    with pytest.raises(ValueError):
        Schedule(delta=0.1, sigma=0.01, alpha=1.0)
    with pytest.raises(ValueError):
        Schedule(delta=0.1, sigma=-0.01)
    with pytest.raises(ValueError):
        Schedule(delta=0.1, sigma=0.01, c3=0.0)


def test_epsilon_value():
    sch = Schedule(delta=0.1, sigma=0.01, alpha=0.5, c1=2.0, c2=0.3, c3=1.0)
    # sqrt(log(1000) / 10)
    assert math.isclose(epsilon(100, sch), 0.831129068134555,
                        rel_tol=1e-14)


def test_epsilon_decreasing():
    sch = Schedule(delta=0.1, sigma=0.01)
    vals = [epsilon(t, sch) for t in range(1, 101)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        epsilon(0, sch)


def test_t_star_values():
    assert t_star(Schedule(delta=0.01, sigma=0.01, c1=5.0, c2=2.0)) == 15
    assert t_star(Schedule(delta=0.1, sigma=0.01)) == 3
    assert t_star(Schedule(delta=0.01, sigma=0.01)) == 4
    assert t_star(Schedule(delta=0.001, sigma=0.01)) == 5


def test_sigma_t_values():
    sch = Schedule(delta=0.1, sigma=0.01)
    assert math.isclose(sigma_t(1, sch, 2), 0.01189207115002721,
                        rel_tol=1e-14)
    # t^(-alpha/2) decay
    assert math.isclose(sigma_t(4, sch, 2) / sigma_t(1, sch, 2),
                        2.0 ** -0.5, rel_tol=1e-12)


def test_pe_noise_clipped(bench):
    sch = bench.schedule(0.1)
    rng = np.random.default_rng(7)
    for t in (1, 5, 50):
        cap = 3.0 * sigma_t(t, sch, bench.par.d_x)
        for _ in range(200):
            xi = pe_noise(t, sch, bench.par, rng)
            assert xi.shape == (1,)
            assert np.linalg.norm(xi) <= cap + 1e-15


# ---------------------------------------------------------------------------
# Parametrization
# ---------------------------------------------------------------------------


def test_free_A_round_trip(bench):
    par = bench.par
    assert par.d_theta == 4
    assert par.d_x == 2 and par.d_u == 1
    th = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(par.A(th), [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(par.B(th), bench.B_star)
    M = par.stacked(th)
    np.testing.assert_allclose(M[:, :2], [[1.0, 2.0], [3.0, 4.0]])


def test_phi_closed_loop(bench):
    phi = bench.par.phi(bench.theta_star, bench.K)
    np.testing.assert_allclose(phi, [[0.174, -0.09], [-0.3556, 0.226]],
                               atol=1e-12)
    assert max(abs(np.linalg.eigvals(phi))) < 1.0


def test_partial_mask():
    # only the off-diagonal A entries are free
    base = np.array([[0.5, 0.0, 1.0], [0.0, 0.3, 0.6]])
    mask = np.array([[False, True, False], [True, False, False]])
    par = Parametrization(base=base, mask=mask)
    assert par.d_theta == 2
    M = par.stacked(np.array([0.2, -0.1]))
    np.testing.assert_allclose(M, [[0.5, 0.2, 1.0], [-0.1, 0.3, 0.6]])


# ---------------------------------------------------------------------------
# Least squares
# ---------------------------------------------------------------------------


def test_lse_noiseless_recovery(bench):
    par = bench.par
    rng = np.random.default_rng(3)
    st = EstimatorState.empty(2, 1)
    x = np.array([1.0, -0.5])
    for _ in range(6):
        u = rng.normal(size=1)
        x_next = bench.A_star @ x + bench.B_star @ u
        st = lse_update(st, x, u, x_next)
        x = x_next + rng.normal(size=2) * 0.0
    th, deficient = lse_point(st, par)
    assert not deficient
    np.testing.assert_allclose(th, bench.theta_star, atol=1e-10)


def test_lse_partial_mask_recovery():
    base = np.array([[0.5, 0.0, 1.0], [0.0, 0.3, 0.6]])
    mask = np.array([[False, True, False], [True, False, False]])
    par = Parametrization(base=base, mask=mask)
    true = np.array([0.15, -0.2])
    M = par.stacked(true)
    A, B = M[:, :2], M[:, 2:]
    rng = np.random.default_rng(11)
    st = EstimatorState.empty(2, 1)
    x = np.array([2.0, 1.0])
    for _ in range(5):
        u = rng.normal(size=1)
        x_next = A @ x + B @ u
        st = lse_update(st, x, u, x_next)
        x = x_next
    th, deficient = lse_point(st, par)
    assert not deficient
    np.testing.assert_allclose(th, true, atol=1e-10)


def test_lse_rank_deficient_flag(bench):
    st = EstimatorState.empty(2, 1)
    st = lse_update(st, [1.0, 0.0], [0.5],
                    bench.A_star @ [1.0, 0.0] + bench.B_star @ [0.5])
    th, deficient = lse_point(st, bench.par)
    assert deficient
    assert np.all(np.isfinite(th))
    with pytest.raises(ValueError):
        lse_point(EstimatorState.empty(2, 1), bench.par)


def test_lse_update_dimension_check():
    st = EstimatorState.empty(2, 1)
    with pytest.raises(ValueError):
        lse_update(st, [1.0, 0.0, 0.0], [0.5], [0.0, 0.0])


# ---------------------------------------------------------------------------
# Parameter distance and ball membership
# ---------------------------------------------------------------------------


def test_matrix_norm_dist(bench):
    par = bench.par
    th = bench.theta_star
    # difference [[0.03, 0], [0, 0.04]] has spectral norm 0.04
    d = th + np.array([0.03, 0.0, 0.0, 0.04])
    assert math.isclose(matrix_norm_dist(d, th, par), 0.04, rel_tol=1e-12)
    assert matrix_norm_dist(th, th, par) == 0.0


def test_ball_in_set(bench):
    par = bench.par
    c = bench.Theta0.center
    rng = np.random.default_rng(0)
    # spectral norm dominates the max entry, so radius 0.05 < half side
    assert ball_in_set(c, 0.05, bench.Theta0, par, 500, rng)
    # centered near a face with a radius that overshoots the gap
    off = c + np.array([0.06, 0.0, 0.0, 0.0])
    rng = np.random.default_rng(0)
    assert not ball_in_set(off, 0.05, bench.Theta0, par, 1000, rng)


# ---------------------------------------------------------------------------
# Set-membership update
# ---------------------------------------------------------------------------


def test_uncertainty_initial(bench):
    sch = bench.schedule(0.1)
    U = UncertaintyState.initial(bench.theta0, bench.Theta0, sch)
    assert U.frozen and not U.anomaly
    assert U.t_star == 3
    assert math.isclose(U.eps, epsilon(1, sch), rel_tol=1e-15)
    assert U.theta_vertices.shape == (16, 4)


def test_update_before_warmup_is_identity(bench):
    sch = bench.schedule(0.1)
    U = UncertaintyState.initial(bench.theta0, bench.Theta0, sch)
    U2 = update_uncertainty(U, bench.theta_star, 2, sch)
    assert U2 is U


def test_update_shrinks_set(bench):
    sch = bench.schedule(0.1)
    U = UncertaintyState.initial(bench.theta0, bench.Theta0, sch)
    U2 = update_uncertainty(U, bench.theta_star, 50, sch)
    assert not U2.frozen and not U2.anomaly
    np.testing.assert_array_equal(U2.theta, bench.theta_star)
    assert isinstance(U2.Theta, Box)
    assert volume(U2.Theta) < volume(bench.Theta0)
    eps = epsilon(50, sch)
    assert math.isclose(U2.eps, eps, rel_tol=1e-15)
    # every vertex stays within the confidence box around the estimate
    assert np.max(np.abs(U2.theta_vertices - bench.theta_star)) <= 2 * eps + 1e-12
    # a second update with the same estimate can only shrink further
    U3 = update_uncertainty(U2, bench.theta_star, 60, sch)
    assert volume(U3.Theta) <= volume(U2.Theta) + 1e-18


def test_update_anomaly_keeps_set(bench):
    sch = bench.schedule(0.1)
    U = UncertaintyState.initial(bench.theta0, bench.Theta0, sch)
    far = bench.theta0 + 10.0
    U2 = update_uncertainty(U, far, 50, sch)
    assert U2.anomaly
    assert U2.Theta is U.Theta
    np.testing.assert_array_equal(U2.theta, far)
