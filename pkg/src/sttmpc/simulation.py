"""Closed-loop execution of the true plant under the self-tuning tube
controller, plus the two baselines (known-parameter tube MPC and plain
state feedback), with full trace recording.

The loop mirrors the online algorithm: observe the state, fold the last
transition into the estimator, move the point estimate and shrink the
uncertainty set once past the warm-up horizon, rebuild the vertex
matrices, tighten with the current noise bounds, solve the tube problem
against the freshest feasible parameter set, apply feedback plus first
move plus excitation. Everything a test might want to condition on is
logged per step, including the monitor of the concentration event
(does the raw estimate sit within the scheduled radius of the true
parameter) which the guarantees are stated under.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .estimation import (EstimatorState, Parametrization, Schedule,
                         UncertaintyState, epsilon, lse_point, lse_update,
                         matrix_norm_dist, pe_noise, sigma_t, t_star,
                         update_uncertainty)
from .geometry import Box, contains, volume
from .solvers import UnstablePhi
from .tube import (AllInfeasible, ControlOutput, Instance, NoiseBounds,
                   TubeDesign, VertexCache, build_problem, control_input,
                   noise_bounds, problem_dump, solve_with_fallback,
                   terminal_cost)

MODES = ("adaptive", "oracle", "k_only")


class InitialInfeasible(RuntimeError):
    """The tube problem has no solution at the initial state; nothing the
    controller does later can fix that."""


class ContractViolation(RuntimeError):
    """An inline invariant failed mid-run. Carries the truncated trace
    and a JSON-friendly dump of the offending step."""

    def __init__(self, reason: str, trace: "Trace", dump: dict | None = None):
        self.reason = reason
        self.trace = trace
        self.dump = dump or {}
        super().__init__(reason)


@dataclass(frozen=True)
class PlantConfig:
    """The true plant: matrices, disturbance scale, and the disturbance
    bounding box (must contain the ball of radius 3 sigma)."""

    A_star: np.ndarray
    B_star: np.ndarray
    sigma: float
    W: Box

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A_star, dtype=float))
        B = np.atleast_2d(np.asarray(self.B_star, dtype=float))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError("A_star must be square and match B_star rows")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.W.dim != A.shape[0]:
            raise ValueError("W dimension must match the state")
        r = 3.0 * self.sigma
        if np.any(self.W.upper < r - 1e-12) or np.any(self.W.lower > -r + 1e-12):
            raise ValueError("W must contain the ball of radius 3 sigma")
        object.__setattr__(self, "A_star", A)
        object.__setattr__(self, "B_star", B)

    @property
    def d_x(self) -> int:
        return self.A_star.shape[0]

    @property
    def d_u(self) -> int:
        return self.B_star.shape[1]

    def theta_star(self, par: Parametrization) -> np.ndarray:
        """True parameter vector under the given parametrization."""
        M = np.hstack([self.A_star, self.B_star])
        return M[par.mask]


@dataclass(frozen=True)
class RunConfig:
    """One closed-loop run: length, horizon, schedule, seed, start state,
    the static-noise-bound flag, controller mode, and whether inline
    invariant assertions are active."""

    steps: int
    N: int
    schedule: Schedule
    seed: int
    x0: np.ndarray
    freeze_wbar: bool = False
    mode: str = "adaptive"
    assertions: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        object.__setattr__(self, "x0",
                           np.atleast_1d(np.asarray(self.x0, dtype=float)))


@dataclass
class Trace:
    """Per-step record of a closed-loop run.

    Scalar/vector fields are stacked arrays with one row per executed
    step; Theta_list keeps the uncertainty set per step for set-level
    tests; wall_ms is timing and deliberately kept out of the CSV so
    repeated runs serialize identically.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    v0: np.ndarray
    zeta: np.ndarray
    w: np.ndarray
    theta: np.ndarray
    est_theta: np.ndarray
    eps: np.ndarray
    vol_theta: np.ndarray
    value: np.ndarray
    stage_cost: np.ndarray
    feasible_current: np.ndarray
    rho_used: np.ndarray
    anomaly: np.ndarray
    g_dist: np.ndarray
    g_ok: np.ndarray
    theta_in_theta: np.ndarray
    theta_in_rho: np.ndarray
    tail_violation: np.ndarray
    tube_violation: np.ndarray
    h_resid: np.ndarray
    wall_ms: np.ndarray
    Theta_list: list
    alpha_list: list
    theta_star: np.ndarray
    mode: str
    seed: int
    abort_reason: str | None = None

    @property
    def steps(self) -> int:
        return self.t.size

    def csv_header(self) -> list:
        d_x = self.x.shape[1]
        d_u = self.u.shape[1]
        d_th = self.theta.shape[1]
        cols = ["t"]
        cols += [f"x{i+1}" for i in range(d_x)]
        cols += [f"u{i+1}" for i in range(d_u)]
        cols += [f"v0_{i+1}" for i in range(d_u)]
        cols += [f"zeta{i+1}" for i in range(d_u)]
        cols += [f"w{i+1}" for i in range(d_x)]
        cols += [f"theta{i+1}" for i in range(d_th)]
        cols += [f"est_theta{i+1}" for i in range(d_th)]
        cols += ["eps", "vol_theta", "value", "stage_cost",
                 "feasible_current", "rho_used", "anomaly", "g_dist", "g_ok",
                 "theta_in_theta", "theta_in_rho", "tail_violation",
                 "tube_violation", "h_resid"]
        return cols

    def to_csv(self, path) -> None:
        """One row per step; floats via repr so replays compare equal
        byte for byte. Column order is csv_header()."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.csv_header())
            for i in range(self.steps):
                row = [int(self.t[i])]
                for arr in (self.x, self.u, self.v0, self.zeta, self.w,
                            self.theta, self.est_theta):
                    row += [repr(float(v)) for v in arr[i]]
                row += [repr(float(self.eps[i])),
                        repr(float(self.vol_theta[i])),
                        repr(float(self.value[i])),
                        repr(float(self.stage_cost[i])),
                        int(self.feasible_current[i]),
                        int(self.rho_used[i]),
                        int(self.anomaly[i]),
                        repr(float(self.g_dist[i])),
                        int(self.g_ok[i]),
                        int(self.theta_in_theta[i]),
                        int(self.theta_in_rho[i]),
                        repr(float(self.tail_violation[i])),
                        repr(float(self.tube_violation[i])),
                        repr(float(self.h_resid[i]))]
                wr.writerow(row)

    def to_json(self, path) -> None:
        """Full-fidelity record, including the per-step uncertainty sets
        and wall-clock timings."""
        doc = {
            "mode": self.mode,
            "seed": self.seed,
            "theta_star": self.theta_star.tolist(),
            "abort_reason": self.abort_reason,
            "columns": self.csv_header(),
            "steps": [
                {
                    "t": int(self.t[i]),
                    "x": self.x[i].tolist(),
                    "u": self.u[i].tolist(),
                    "v0": self.v0[i].tolist(),
                    "zeta": self.zeta[i].tolist(),
                    "w": self.w[i].tolist(),
                    "theta": self.theta[i].tolist(),
                    "est_theta": self.est_theta[i].tolist(),
                    "eps": float(self.eps[i]),
                    "vol_theta": float(self.vol_theta[i]),
                    "value": float(self.value[i]),
                    "stage_cost": float(self.stage_cost[i]),
                    "feasible_current": bool(self.feasible_current[i]),
                    "rho_used": int(self.rho_used[i]),
                    "anomaly": bool(self.anomaly[i]),
                    "g_dist": float(self.g_dist[i]),
                    "g_ok": bool(self.g_ok[i]),
                    "theta_in_theta": bool(self.theta_in_theta[i]),
                    "theta_in_rho": bool(self.theta_in_rho[i]),
                    "tail_violation": float(self.tail_violation[i]),
                    "tube_violation": float(self.tube_violation[i]),
                    "h_resid": float(self.h_resid[i]),
                    "wall_ms": float(self.wall_ms[i]),
                    "Theta": self.Theta_list[i].to_json(),
                    "alpha": (self.alpha_list[i].tolist()
                              if self.alpha_list[i] is not None else None),
                }
                for i in range(self.steps)
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)


@dataclass
class ViolationReport:
    """Outcome of check_constraints: the worst signed margin of
    F x + G u - 1 and where it first went positive."""

    worst: float
    first_violation_step: int | None
    per_step: np.ndarray

    @property
    def clean(self) -> bool:
        return self.first_violation_step is None


def check_constraints(trace: Trace, F: np.ndarray, G: np.ndarray,
                      tol: float = 1e-9) -> ViolationReport:
    """Evaluate the state-input constraints along an executed trace."""
    vals = np.array([float(np.max(F @ x + G @ u - 1.0))
                     for x, u in zip(trace.x, trace.u)])
    bad = np.nonzero(vals > tol)[0]
    first = int(trace.t[bad[0]]) if bad.size else None
    return ViolationReport(worst=float(vals.max()) if vals.size else -np.inf,
                           first_violation_step=first, per_step=vals)


def sample_disturbance(rng: np.random.Generator, sigma: float,
                       d_x: int) -> np.ndarray:
    """Isotropic Gaussian disturbance radially clipped to norm 3 sigma."""
    if sigma == 0.0:
        return np.zeros(d_x)
    w = rng.normal(0.0, sigma, size=d_x)
    nrm = float(np.linalg.norm(w))
    if nrm > 3.0 * sigma:
        w *= 3.0 * sigma / nrm
    return w


def step_plant(x: np.ndarray, u: np.ndarray, w: np.ndarray,
               plant: PlantConfig) -> np.ndarray:
    """True dynamics: A* x + B* u + w."""
    return plant.A_star @ x + plant.B_star @ u + w


class _Rows:
    """Column-wise accumulator for the trace."""

    def __init__(self):
        self.data: dict = {}

    def add(self, **kv):
        for k, v in kv.items():
            self.data.setdefault(k, []).append(v)

    def stack(self, key, width=None):
        vals = self.data.get(key, [])
        arr = np.array(vals)
        if width is not None and arr.ndim == 1:
            arr = arr.reshape(-1, width)
        return arr


def _make_trace(rows: _Rows, plant: PlantConfig, par: Parametrization,
                run: RunConfig, theta_list: list, alpha_list: list,
                abort_reason: str | None) -> Trace:
    d_x, d_u, d_th = plant.d_x, plant.d_u, par.d_theta
    return Trace(
        t=rows.stack("t"),
        x=rows.stack("x", d_x), u=rows.stack("u", d_u),
        v0=rows.stack("v0", d_u), zeta=rows.stack("zeta", d_u),
        w=rows.stack("w", d_x), theta=rows.stack("theta", d_th),
        est_theta=rows.stack("est_theta", d_th),
        eps=rows.stack("eps"), vol_theta=rows.stack("vol_theta"),
        value=rows.stack("value"), stage_cost=rows.stack("stage_cost"),
        feasible_current=rows.stack("feasible_current").astype(bool),
        rho_used=rows.stack("rho_used").astype(int),
        anomaly=rows.stack("anomaly").astype(bool),
        g_dist=rows.stack("g_dist"), g_ok=rows.stack("g_ok").astype(bool),
        theta_in_theta=rows.stack("theta_in_theta").astype(bool),
        theta_in_rho=rows.stack("theta_in_rho").astype(bool),
        tail_violation=rows.stack("tail_violation"),
        tube_violation=rows.stack("tube_violation"),
        h_resid=rows.stack("h_resid"),
        wall_ms=rows.stack("wall_ms"),
        Theta_list=theta_list,
        alpha_list=alpha_list,
        theta_star=plant.theta_star(par),
        mode=run.mode, seed=run.seed, abort_reason=abort_reason,
    )


def run_closed_loop(plant: PlantConfig, run: RunConfig, design: TubeDesign,
                    par: Parametrization, theta0: np.ndarray,
                    Theta0: Box) -> Trace:
    """Execute the full loop for run.steps steps and return the trace.

    Time starts at t = 1 with x_1 = run.x0; from t = 2 on, the previous
    transition enters the estimator before anything else happens at t.
    The point and set update only from the warm-up horizon on (and once
    two transitions are in). Raises InitialInfeasible if the very first
    solve fails, ContractViolation (with the truncated trace attached)
    if an inline invariant breaks mid-run and assertions are on.
    """
    if design.N != run.N:
        raise ValueError("design horizon differs from run.N")
    sch = run.schedule
    d_x, d_u = plant.d_x, plant.d_u
    theta_star = plant.theta_star(par)
    adaptive = run.mode == "adaptive"

    ss = np.random.SeedSequence(run.seed)
    rng_w, rng_xi, rng_mc = (np.random.Generator(np.random.PCG64(s))
                             for s in ss.spawn(3))

    if run.mode == "oracle":
        theta0 = theta_star
        Theta0 = Box(theta_star, theta_star)
        U = UncertaintyState(theta=theta_star, Theta=Theta0,
                             eps=epsilon(1, sch),
                             theta_vertices=theta_star[None, :],
                             t_star=t_star(sch), frozen=True)
    else:
        U = UncertaintyState.initial(theta0, Theta0, sch)
    est = EstimatorState.empty(d_x, d_u)
    cache = VertexCache(design, par)
    history: list = []
    frozen_wbar: np.ndarray | None = None

    rows = _Rows()
    theta_list: list = []
    alpha_list: list = []
    x = run.x0.copy()
    prev: tuple | None = None
    g_ok = True

    def fail(reason, dump=None):
        tr = _make_trace(rows, plant, par, run, theta_list, alpha_list, reason)
        return ContractViolation(reason, tr, dump)

    for t in range(1, run.steps + 1):
        tic = time.perf_counter()
        if prev is not None:
            est = lse_update(est, prev[0], prev[1], x)

        est_th = np.full(par.d_theta, np.nan)
        g_dist = np.nan
        if adaptive and t >= U.t_star and est.count >= 1:
            est_th, _ = lse_point(est, par)
            g_dist = matrix_norm_dist(est_th, theta_star, par)
            if g_dist > epsilon(t, sch):
                g_ok = False
        if adaptive and t >= U.t_star and est.count >= 2:
            U = update_uncertainty(U, est_th, t, sch)

        s_t = sigma_t(t, sch, d_x) if adaptive else 0.0

        if run.mode == "k_only":
            zeta = np.zeros(d_u)
            u = design.K @ x
            v0 = np.zeros(d_u)
            out = None
            nb = None
        else:
            vdata = cache.get(U.theta_vertices)
            nb = noise_bounds(design.T, design.G, plant.W, s_t, vdata.Bs)
            if run.freeze_wbar:
                if frozen_wbar is None:
                    frozen_wbar = nb.w_bar
                nb = NoiseBounds(w_bar=frozen_wbar, zeta_bar=nb.zeta_bar,
                                 B_bar=nb.B_bar)
            current = Instance(t, U.theta, U.Theta, vdata)
            try:
                out = solve_with_fallback(x, current, history, nb, design,
                                          par)
            except AllInfeasible as e:
                if t == 1:
                    raise InitialInfeasible(str(e)) from e
                raise fail(f"no feasible parameter set at t={t}",
                           {"detail": str(e)}) from e
            except UnstablePhi as e:
                raise fail(f"unstable prediction matrix at t={t}",
                           {"detail": str(e)}) from e
            zeta = pe_noise(t, sch, par, rng_xi) if adaptive else np.zeros(d_u)
            v0 = out.v_star[0]
            u = control_input(x, v0, zeta, design.K)

        w = sample_disturbance(rng_w, plant.sigma, d_x)
        x_next = step_plant(x, u, w, plant)
        stage = float(x @ design.Q @ x + u @ design.R @ u)

        theta_in_theta = contains(U.Theta, theta_star)
        if out is not None:
            theta_in_rho = contains(out.instance.Theta, theta_star)
            h_resid = vdata.worst_identity_residual(design.T)
            h_min = float(vdata.Hs.min())
            tube_viol = float(np.max(design.T @ x_next - out.alpha_star[1]))
            tail_viol = _tail_violation(x_next, out, t, sch, plant, design,
                                        par, frozen_wbar if run.freeze_wbar
                                        else None, adaptive)
            if run.assertions:
                if h_resid > 1e-8 or h_min < -1e-12:
                    raise fail(f"tube matrix identity broke at t={t}",
                               {"h_resid": h_resid, "h_min": h_min})
                if out.report.max_residual() > 1e-6:
                    raise fail(f"solver residual too large at t={t}",
                               problem_dump(out.problem, out.report))
                if theta_in_rho and tube_viol > 1e-6:
                    raise fail(f"realized state left the tube at t={t}",
                               {"tube_violation": tube_viol})
                if theta_in_rho and tail_viol > 1e-6:
                    raise fail(f"tail point infeasible at t={t}",
                               {"tail_violation": tail_viol})
        else:
            theta_in_rho = theta_in_theta
            h_resid = 0.0
            tube_viol = np.nan
            tail_viol = np.nan

        rows.add(
            t=t, x=x.copy(), u=np.atleast_1d(u).copy(), v0=v0.copy(),
            zeta=zeta.copy(), w=w.copy(), theta=U.theta.copy(),
            est_theta=est_th,
            eps=float(U.eps), vol_theta=volume(U.Theta, rng=rng_mc),
            value=out.value if out is not None else np.nan,
            stage_cost=stage,
            feasible_current=out.feasible_current if out is not None else True,
            rho_used=out.rho_used if out is not None else t,
            anomaly=U.anomaly, g_dist=g_dist, g_ok=g_ok,
            theta_in_theta=theta_in_theta, theta_in_rho=theta_in_rho,
            tail_violation=tail_viol, tube_violation=tube_viol,
            h_resid=h_resid,
            wall_ms=(time.perf_counter() - tic) * 1e3,
        )
        theta_list.append(U.Theta)
        alpha_list.append(out.alpha_star.copy() if out is not None else None)
        prev = (x.copy(), np.atleast_1d(u).copy())
        x = x_next

    return _make_trace(rows, plant, par, run, theta_list, alpha_list, None)


def _tail_violation(x_next, out: ControlOutput, t: int, sch: Schedule,
                    plant: PlantConfig, design: TubeDesign,
                    par: Parametrization, frozen_wbar, adaptive: bool) -> float:
    """Worst constraint violation of the shifted solution at the next
    state, against the same parameter set with next-step noise bounds.

    Using the solved instance's vertex set makes the bound conservative
    (the actual next-step set only shrinks), so a pass here implies the
    real next problem accepts the tail point.
    """
    inst = out.instance
    s_next = sigma_t(t + 1, sch, plant.d_x) if adaptive else 0.0
    nb = noise_bounds(design.T, design.G, plant.W, s_next, inst.vdata.Bs)
    if frozen_wbar is not None:
        nb = NoiseBounds(w_bar=frozen_wbar, zeta_bar=nb.zeta_bar,
                         B_bar=nb.B_bar)
    P = terminal_cost(inst.theta, design, par)
    prob = build_problem(x_next, inst.theta, inst.vdata, nb, design, P, par)
    v_tail = np.vstack([out.v_star[1:], np.zeros((1, design.d_u))])
    a_tail = np.vstack([out.alpha_star[1:], out.alpha_star[-1:]])
    return prob.violation(prob.join(v_tail, a_tail))


def run_oracle(plant: PlantConfig, run: RunConfig, design: TubeDesign,
               par: Parametrization) -> Trace:
    """Baseline loop with the true parameter known: singleton set, no
    excitation, no estimation."""
    run = replace(run, mode="oracle")
    th = plant.theta_star(par)
    return run_closed_loop(plant, run, design, par, th, Box(th, th))
