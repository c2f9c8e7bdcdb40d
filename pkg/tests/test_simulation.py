"""Closed-loop harness: plant stepping, run configs, the three controller
modes, trace serialization, and the constraint checker."""

import csv
import json
import math

import numpy as np
import pytest

from sttmpc.geometry import Box
from sttmpc.simulation import (InitialInfeasible, PlantConfig, RunConfig,
                               check_constraints, run_closed_loop,
                               run_oracle, sample_disturbance, step_plant)

# ---------------------------------------------------------------------------
# Configs and primitives
# ---------------------------------------------------------------------------


def test_plant_config_validation(bench):
    with pytest.raises(ValueError):
        PlantConfig(np.ones((2, 3)), bench.B_star, 0.01, bench.W)
    with pytest.raises(ValueError):
        PlantConfig(bench.A_star, np.ones((3, 1)), 0.01, bench.W)
    with pytest.raises(ValueError):
        PlantConfig(bench.A_star, bench.B_star, -0.1, bench.W)
    # disturbance box must contain the 3 sigma ball
    with pytest.raises(ValueError):
        PlantConfig(bench.A_star, bench.B_star, 0.02,
                    Box([-0.03, -0.03], [0.03, 0.03]))


def test_run_config_validation(bench):
    sch = bench.schedule(0.1)
    with pytest.raises(ValueError):
        RunConfig(steps=0, N=10, schedule=sch, seed=0, x0=bench.x0)
    with pytest.raises(ValueError):
        RunConfig(steps=5, N=10, schedule=sch, seed=0, x0=bench.x0,
                  mode="wrong")


def test_theta_star_extraction(bench):
    np.testing.assert_array_equal(bench.plant.theta_star(bench.par),
                                  [0.6, 0.2, -0.1, 0.4])


def test_sample_disturbance_clip():
    rng = np.random.default_rng(1)
    for _ in range(500):
        w = sample_disturbance(rng, 0.01, 2)
        assert np.linalg.norm(w) <= 0.03 + 1e-15
    np.testing.assert_array_equal(sample_disturbance(rng, 0.0, 2),
                                  [0.0, 0.0])


def test_step_plant(bench):
    x = np.array([1.0, -2.0])
    u = np.array([0.5])
    w = np.array([0.01, -0.02])
    np.testing.assert_allclose(
        step_plant(x, u, w, bench.plant),
        bench.A_star @ x + bench.B_star @ u + w, atol=1e-15)


# ---------------------------------------------------------------------------
# Closed-loop runs
# ---------------------------------------------------------------------------

STEPS = 12


@pytest.fixture(scope="module")
def short_trace(bench, bench_design):
    run = RunConfig(steps=STEPS, N=10, schedule=bench.schedule(0.1), seed=0,
                    x0=bench.x0, freeze_wbar=True)
    return run_closed_loop(bench.plant, run, bench_design, bench.par,
                           bench.theta0, bench.Theta0)


def test_adaptive_trace_structure(bench, short_trace):
    tr = short_trace
    assert tr.steps == STEPS
    assert tr.abort_reason is None
    np.testing.assert_array_equal(tr.t, np.arange(1, STEPS + 1))
    np.testing.assert_array_equal(tr.x[0], bench.x0)
    assert tr.x.shape == (STEPS, 2)
    assert tr.u.shape == (STEPS, 1)
    assert tr.theta.shape == (STEPS, 4)
    # every step solved against the freshest set
    assert np.all(tr.feasible_current)
    np.testing.assert_array_equal(tr.rho_used, tr.t)
    assert np.all(np.isfinite(tr.value))
    assert not np.any(tr.anomaly)


def test_adaptive_trace_dynamics_consistent(bench, short_trace):
    tr = short_trace
    for i in range(STEPS - 1):
        np.testing.assert_allclose(
            tr.x[i + 1],
            bench.A_star @ tr.x[i] + bench.B_star @ tr.u[i] + tr.w[i],
            atol=1e-12)
    # stage cost recomputes from the stored state and input
    for i in range(STEPS):
        s = tr.x[i] @ bench.Q @ tr.x[i] + tr.u[i] @ bench.R @ tr.u[i]
        assert math.isclose(tr.stage_cost[i], s, rel_tol=1e-12)
    assert np.all(np.linalg.norm(tr.w, axis=1) <= 3 * bench.sigma + 1e-15)


def test_adaptive_set_updates(bench, short_trace):
    tr = short_trace
    # warm-up horizon is 3 at delta 0.1: the set is untouched before it
    np.testing.assert_array_equal(tr.theta[0], bench.theta0)
    np.testing.assert_array_equal(tr.theta[1], bench.theta0)
    assert not np.array_equal(tr.theta[3], bench.theta0)
    vols = tr.vol_theta
    assert np.all(np.diff(vols) <= 1e-18)
    assert vols[-1] < vols[0]
    # the true parameter never leaves the running set in this run
    assert np.all(tr.theta_in_theta)
    assert np.all(tr.theta_in_rho)
    assert np.all(tr.h_resid <= 1e-8)
    assert np.nanmax(tr.tube_violation) <= 1e-6
    assert np.nanmax(tr.tail_violation) <= 1e-6


def test_run_determinism_and_csv(bench, bench_design, short_trace, tmp_path):
    run = RunConfig(steps=STEPS, N=10, schedule=bench.schedule(0.1), seed=0,
                    x0=bench.x0, freeze_wbar=True)
    tr2 = run_closed_loop(bench.plant, run, bench_design, bench.par,
                          bench.theta0, bench.Theta0)
    np.testing.assert_array_equal(short_trace.x, tr2.x)
    np.testing.assert_array_equal(short_trace.u, tr2.u)
    np.testing.assert_array_equal(short_trace.w, tr2.w)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    short_trace.to_csv(p1)
    tr2.to_csv(p2)
    assert p1.read_bytes() == p2.read_bytes()
    with open(p1, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == short_trace.csv_header()
    assert len(rows) == STEPS + 1
    # repr round trip preserves the exact float
    assert float(rows[1][1]) == short_trace.x[0, 0]


def test_seed_changes_trace(bench, bench_design, short_trace):
    run = RunConfig(steps=STEPS, N=10, schedule=bench.schedule(0.1), seed=1,
                    x0=bench.x0, freeze_wbar=True)
    tr2 = run_closed_loop(bench.plant, run, bench_design, bench.par,
                          bench.theta0, bench.Theta0)
    assert not np.array_equal(short_trace.w, tr2.w)


def test_json_round_trip(short_trace, tmp_path):
    p = tmp_path / "trace.json"
    short_trace.to_json(p)
    doc = json.loads(p.read_text())
    assert doc["seed"] == 0 and doc["mode"] == "adaptive"
    assert doc["columns"] == short_trace.csv_header()
    assert len(doc["steps"]) == STEPS
    step = doc["steps"][0]
    assert step["t"] == 1
    np.testing.assert_allclose(step["x"], short_trace.x[0])
    assert len(step["alpha"]) == 11
    assert "Theta" in step and step["wall_ms"] >= 0.0


def test_oracle_mode(bench, bench_design, short_trace):
    run = RunConfig(steps=STEPS, N=10, schedule=bench.schedule(0.1), seed=0,
                    x0=bench.x0, freeze_wbar=True)
    tr = run_oracle(bench.plant, run, bench_design, bench.par)
    assert tr.mode == "oracle"
    np.testing.assert_array_equal(tr.zeta, 0.0)
    np.testing.assert_array_equal(tr.theta,
                                  np.tile(bench.theta_star, (STEPS, 1)))
    np.testing.assert_array_equal(tr.vol_theta, 0.0)
    assert np.all(np.isfinite(tr.value))
    # disturbance stream is paired with the adaptive run of the same seed
    np.testing.assert_array_equal(tr.w, short_trace.w)


def test_k_only_mode(bench, bench_design):
    run = RunConfig(steps=STEPS, N=10, schedule=bench.schedule(0.1), seed=0,
                    x0=bench.x0, mode="k_only")
    tr = run_closed_loop(bench.plant, run, bench_design, bench.par,
                         bench.theta0, bench.Theta0)
    for i in range(STEPS):
        np.testing.assert_allclose(tr.u[i], bench.K @ tr.x[i], atol=1e-15)
    np.testing.assert_array_equal(tr.v0, 0.0)
    assert np.all(np.isnan(tr.value))


# ---------------------------------------------------------------------------
# Constraint checking
# ---------------------------------------------------------------------------


def test_check_constraints_clean(bench, short_trace):
    rep = check_constraints(short_trace, bench.F, bench.G)
    assert rep.clean
    assert rep.worst <= 1e-9
    assert rep.first_violation_step is None
    assert rep.per_step.shape == (STEPS,)


def test_check_constraints_flags_k_only(bench, bench_design):
    # pure feedback from this start dips x2 below its floor at step 2
    run = RunConfig(steps=4, N=10, schedule=bench.schedule(0.1), seed=0,
                    x0=bench.x0, mode="k_only")
    tr = run_closed_loop(bench.plant, run, bench_design, bench.par,
                         bench.theta0, bench.Theta0)
    rep = check_constraints(tr, bench.F, bench.G)
    assert not rep.clean
    assert rep.worst > 0.1
    assert rep.first_violation_step == 2


def test_initial_infeasible(bench, bench_design):
    run = RunConfig(steps=3, N=10, schedule=bench.schedule(0.1), seed=0,
                    x0=np.array([100.0, 100.0]))
    with pytest.raises(InitialInfeasible):
        run_closed_loop(bench.plant, run, bench_design, bench.par,
                        bench.theta0, bench.Theta0)


def test_design_horizon_mismatch(bench, bench_design):
    run = RunConfig(steps=3, N=7, schedule=bench.schedule(0.1), seed=0,
                    x0=bench.x0)
    with pytest.raises(ValueError):
        run_closed_loop(bench.plant, run, bench_design, bench.par,
                        bench.theta0, bench.Theta0)
