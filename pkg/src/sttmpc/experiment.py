"""Config-driven experiment runner: seed-by-confidence-level sweeps of the
closed loop, per-run trace artifacts (CSV + JSON), aggregated volume-decay
tables, figures, and a machine-readable summary.

Artifact layout under the output directory:

    delta-<d>/seed-<s>.csv     per-step trace, documented column order
    delta-<d>/seed-<s>.json    full-fidelity trace (sets, tube offsets,
                               wall-clock)
    table.csv, table.txt       volume-decay aggregation
    volume_decay.svg           mean volume ratio vs t per delta
    trajectory.svg             state plane: trajectory, constraints, tube
    summary.json               code version, config hash, runtime,
                               failures (timestamps live here only)
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .estimation import Parametrization, Schedule
from .geometry import Box, HPolytope, vertices
from .simulation import (ContractViolation, InitialInfeasible, PlantConfig,
                         RunConfig, run_closed_loop)
from .solvers import lqr_gain
from .tube import TubeDesign, design_tube

SCHEMA_VERSION = 1
TABLE_TIMES = (1, 5, 15, 50, 100)
OUT_ROOT_ENV = "STTMPC_OUT_ROOT"


class ConfigError(ValueError):
    """Configuration problem, named field included in the message."""


def _get(doc: dict, *path, default=... ):
    node = doc
    for key in path:
        if not isinstance(node, dict) or key not in node:
            if default is not ...:
                return default
            raise ConfigError(f"missing config field: {'.'.join(path)}")
        node = node[key]
    return node


def _mat(doc: dict, *path, default=...) -> np.ndarray:
    raw = _get(doc, *path, default=default)
    try:
        return np.atleast_2d(np.asarray(raw, dtype=float))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"field {'.'.join(path)} is not numeric: {e}") from e


def _vec(doc: dict, *path, default=...) -> np.ndarray:
    raw = _get(doc, *path, default=default)
    try:
        return np.atleast_1d(np.asarray(raw, dtype=float))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"field {'.'.join(path)} is not numeric: {e}") from e


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment: plant, parametrization, initial
    uncertainty, controller design inputs, schedule constants, and the
    sweep grid. raw keeps the resolved document for hashing."""

    plant: PlantConfig
    par: Parametrization
    theta0: np.ndarray
    Theta0: Box
    K: np.ndarray
    lam: float
    N: int
    Q: np.ndarray
    R: np.ndarray
    F: np.ndarray
    G: np.ndarray
    alpha: float
    c1: float
    c2: float
    c3: float
    deltas: tuple
    seeds: tuple
    steps: int
    x0: np.ndarray
    freeze_wbar: bool
    assertions: bool
    emit_svg: bool
    output_dir: str | None
    raw: dict

    def schedule(self, delta: float) -> Schedule:
        return Schedule(delta=float(delta), sigma=self.plant.sigma,
                        alpha=self.alpha, c1=self.c1, c2=self.c2, c3=self.c3)

    def run_config(self, delta: float, seed: int) -> RunConfig:
        return RunConfig(steps=self.steps, N=self.N,
                         schedule=self.schedule(delta), seed=int(seed),
                         x0=self.x0, freeze_wbar=self.freeze_wbar,
                         assertions=self.assertions)


def load_config(path) -> dict:
    """Parse the YAML config file; parse errors carry line numbers."""
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigError(f"config parse error{where}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    return doc


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply `--set dotted.key=value` pairs; values parse as YAML.
    Overridden keys must already exist, which catches typos."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value: {item!r}")
        key, _, raw = item.partition("=")
        node = doc
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"override targets unknown field: {key}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"override targets unknown field: {key}")
        try:
            node[parts[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"override value for {key} unparseable: {e}") from e
    return doc


def config_hash(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate the resolved document and build every object the runs
    need. Raises ConfigError naming the offending field."""
    A_star = _mat(doc, "plant", "A_star")
    B_star = _mat(doc, "plant", "B_star")
    sigma = float(_get(doc, "plant", "sigma"))
    d_x = A_star.shape[0]
    w_half = _vec(doc, "plant", "w_half_width")
    if w_half.size == 1:
        w_half = np.full(d_x, float(w_half[0]))
    if w_half.size != d_x:
        raise ConfigError("plant.w_half_width must be scalar or d_x long")
    try:
        plant = PlantConfig(A_star, B_star, sigma, Box(-w_half, w_half))
    except ValueError as e:
        raise ConfigError(f"plant: {e}") from e

    mask = _get(doc, "parametrization", "mask", default=None)
    if mask is None:
        par = Parametrization.free_A(B_star)
    else:
        known = _mat(doc, "parametrization", "known")
        try:
            par = Parametrization(base=known,
                                  mask=np.asarray(mask, dtype=bool))
        except ValueError as e:
            raise ConfigError(f"parametrization: {e}") from e

    theta0 = _vec(doc, "uncertainty", "theta0")
    center = _vec(doc, "uncertainty", "center")
    side = float(_get(doc, "uncertainty", "side"))
    if theta0.size != par.d_theta or center.size != par.d_theta:
        raise ConfigError("uncertainty.theta0/center length must match the "
                          "number of free parameters")
    if side <= 0:
        raise ConfigError("uncertainty.side must be positive")
    Theta0 = Box(center - side / 2.0, center + side / 2.0)

    F = _mat(doc, "constraints", "F")
    G = _mat(doc, "constraints", "G")
    if F.shape[1] != d_x or G.shape[0] != F.shape[0]:
        raise ConfigError("constraints.F/G dimensions inconsistent")

    Q = _mat(doc, "controller", "Q")
    R = _mat(doc, "controller", "R")
    lam = float(_get(doc, "controller", "lam"))
    N = int(_get(doc, "controller", "N"))
    if not 0.0 < lam < 1.0:
        raise ConfigError("controller.lam must lie in (0, 1)")
    if N < 1:
        raise ConfigError("controller.N must be >= 1")
    K_raw = _get(doc, "controller", "K", default=None)
    if K_raw is None:
        K = lqr_gain(par.A(theta0), par.B(theta0), Q, R)
    else:
        K = _mat(doc, "controller", "K")
    if K.shape != (G.shape[1], d_x):
        raise ConfigError("controller.K must be d_u x d_x")

    deltas = _get(doc, "run", "deltas")
    if not isinstance(deltas, (list, tuple)) or not deltas:
        raise ConfigError("run.deltas must be a nonempty list")
    seeds = _get(doc, "run", "seeds")
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise ConfigError("run.seeds must be a count or a nonempty list")
    steps = int(_get(doc, "run", "steps"))
    x0 = _vec(doc, "run", "x0")
    if x0.size != d_x:
        raise ConfigError("run.x0 length must match the state dimension")

    return ExperimentConfig(
        plant=plant, par=par, theta0=theta0, Theta0=Theta0, K=K,
        lam=lam, N=N, Q=Q, R=R, F=F, G=G,
        alpha=float(_get(doc, "schedule", "alpha", default=0.5)),
        c1=float(_get(doc, "schedule", "c1", default=2.0)),
        c2=float(_get(doc, "schedule", "c2", default=0.3)),
        c3=float(_get(doc, "schedule", "c3", default=1.2e-4)),
        deltas=tuple(float(d) for d in deltas),
        seeds=tuple(int(s) for s in seeds),
        steps=steps, x0=x0,
        freeze_wbar=bool(_get(doc, "run", "freeze_wbar", default=True)),
        assertions=bool(_get(doc, "run", "assertions", default=True)),
        emit_svg=bool(_get(doc, "run", "emit_svg", default=True)),
        output_dir=_get(doc, "run", "output_dir", default=None),
        raw=doc,
    )


def build_design(cfg: ExperimentConfig) -> TubeDesign:
    return design_tube(cfg.par, vertices(cfg.Theta0).vertices, cfg.F, cfg.G,
                       cfg.K, cfg.lam, cfg.N, cfg.Q, cfg.R)


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(cfg: ExperimentConfig, design: TubeDesign, out_dir: str):
    _WORKER["cfg"] = cfg
    _WORKER["design"] = design
    _WORKER["out"] = Path(out_dir)


def _cell_paths(out_dir: Path, delta: float, seed: int):
    d = out_dir / f"delta-{delta:g}"
    return d / f"seed-{seed:03d}.csv", d / f"seed-{seed:03d}.json"


def _run_cell(cell) -> tuple:
    """One (delta, seed) run; returns ("ok"| "contract" | "infeasible",
    message, dump). Exceptions are converted so the pool survives."""
    delta, seed = cell
    cfg: ExperimentConfig = _WORKER["cfg"]
    design: TubeDesign = _WORKER["design"]
    out_dir: Path = _WORKER["out"]
    csv_path, json_path = _cell_paths(out_dir, delta, seed)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        tr = run_closed_loop(cfg.plant, cfg.run_config(delta, seed),
                             design, cfg.par, cfg.theta0, cfg.Theta0)
    except InitialInfeasible as e:
        dump = csv_path.with_name(f"seed-{seed:03d}-failure.json")
        dump.write_text(str(e))
        return ("infeasible", f"delta={delta:g} seed={seed}: {e}", str(dump))
    except ContractViolation as e:
        dump = csv_path.with_name(f"seed-{seed:03d}-failure.json")
        dump.write_text(json.dumps({"reason": e.reason, "dump": e.dump},
                                   indent=1, default=str))
        e.trace.to_json(csv_path.with_name(f"seed-{seed:03d}-partial.json"))
        return ("contract", f"delta={delta:g} seed={seed}: {e.reason}",
                str(dump))
    tr.to_csv(csv_path)
    tr.to_json(json_path)
    return ("ok", "", "")


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=10)
        if res.returncode == 0:
            return res.stdout.strip()
    except OSError:
        pass
    return f"v{__version__}"


def resolve_out_dir(cfg: ExperimentConfig, out_flag, digest: str) -> Path:
    if out_flag:
        return Path(out_flag)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / f"exp-{digest[:8]}"


def run_experiment(config_path, overrides=(), jobs: int = 1,
                   out=None) -> Path:
    """Run the whole grid, aggregate, plot, and write summary.json.
    Returns the artifact directory. Raises the first per-cell failure
    after the grid drains (InitialInfeasible / ContractViolation)."""
    t0 = time.perf_counter()
    doc = apply_overrides(load_config(config_path), overrides)
    cfg = parse_config(doc)
    digest = config_hash(doc)
    out_dir = resolve_out_dir(cfg, out, digest)
    out_dir.mkdir(parents=True, exist_ok=True)

    design = build_design(cfg)
    grid = [(d, s) for d in cfg.deltas for s in cfg.seeds]
    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(cfg, design, str(out_dir))) as ex:
            results = list(ex.map(_run_cell, grid))
    else:
        _init_worker(cfg, design, str(out_dir))
        results = [_run_cell(cell) for cell in grid]

    failures = [(kind, msg, dump) for kind, msg, dump in results
                if kind != "ok"]

    if len(failures) < len(results):
        table = aggregate_volumes(collect_traces(out_dir))
        (out_dir / "table.csv").write_text(table.to_csv_text())
        (out_dir / "table.txt").write_text(table.to_text())
        if cfg.emit_svg:
            emit_plots(out_dir)

    summary = {
        "schema_version": SCHEMA_VERSION,
        "version": _git_describe(),
        "config_hash": digest,
        "config": doc,
        "design": {"T": design.T.tolist(), "lam": design.lam,
                   "N": design.N, "K": design.K.tolist()},
        "runtime_s": time.perf_counter() - t0,
        "generated_unix": time.time(),
        "cells": len(grid),
        "failures": [{"kind": k, "message": m, "dump": d}
                     for k, m, d in failures],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1,
                                                     default=str))

    if failures:
        kind, msg, _ = failures[0]
        if kind == "infeasible":
            raise InitialInfeasible(msg)
        raise ContractViolation(msg, trace=None, dump={})
    return out_dir


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def collect_traces(out_dir) -> dict:
    """Read every trace CSV under out_dir into {delta: [per-seed dict of
    column arrays]}, sorted by seed."""
    out_dir = Path(out_dir)
    groups: dict = {}
    for ddir in sorted(out_dir.glob("delta-*")):
        try:
            delta = float(ddir.name.split("-", 1)[1])
        except ValueError:
            continue
        runs = []
        for f in sorted(ddir.glob("seed-*.csv")):
            with open(f) as fh:
                rows = list(csv.DictReader(fh))
            cols = {k: np.array([float(r[k]) for r in rows])
                    for k in ("t", "vol_theta", "x1", "x2")
                    if rows and k in rows[0]}
            cols["seed"] = int(f.stem.split("-")[1])
            runs.append(cols)
        if runs:
            groups[delta] = runs
    return groups


@dataclass(frozen=True)
class VolumeTable:
    """Mean and standard error of 100 Vol(Theta_t)/Vol(Theta_0) per
    confidence level, at the report times."""

    deltas: tuple
    times: tuple
    mean_pct: np.ndarray
    stderr_pct: np.ndarray
    n_seeds: tuple

    def to_csv_text(self) -> str:
        lines = ["delta,t,mean_pct,stderr_pct,n_seeds"]
        for i, d in enumerate(self.deltas):
            for j, t in enumerate(self.times):
                lines.append(f"{d:g},{t},{self.mean_pct[i, j]:.6f},"
                             f"{self.stderr_pct[i, j]:.6f},{self.n_seeds[i]}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = ["delta".ljust(8)] + [f"t={t}".rjust(20) for t in self.times]
        lines = ["".join(head)]
        for i, d in enumerate(self.deltas):
            cells = [f"{d:g}".ljust(8)]
            for j in range(len(self.times)):
                cells.append(f"{self.mean_pct[i, j]:10.4f} "
                             f"± {self.stderr_pct[i, j]:6.4f}%".rjust(20))
            lines.append("".join(cells))
        return "\n".join(lines) + "\n"


def aggregate_volumes(groups: dict, times=TABLE_TIMES) -> VolumeTable:
    """Reduce per-seed volume traces to the report table. Ratios are per
    seed against that run's t=1 volume (= the initial set, updates start
    later), in percent; the standard error is over seeds (0 for one)."""
    if not groups:
        raise ValueError("no traces to aggregate")
    deltas = tuple(sorted(groups, reverse=True))
    max_t = int(min(r["t"].max() for runs in groups.values() for r in runs))
    times = tuple(t for t in times if t <= max_t)
    mean = np.zeros((len(deltas), len(times)))
    se = np.zeros_like(mean)
    n_seeds = []
    for i, d in enumerate(deltas):
        runs = groups[d]
        n_seeds.append(len(runs))
        ratios = np.empty((len(runs), len(times)))
        for r_i, r in enumerate(runs):
            v = r["vol_theta"]
            tt = r["t"].astype(int)
            v0 = v[tt == 1][0]
            for j, t in enumerate(times):
                ratios[r_i, j] = 100.0 * v[tt == t][0] / v0
        mean[i] = ratios.mean(axis=0)
        se[i] = (ratios.std(axis=0, ddof=1) / math.sqrt(len(runs))
                 if len(runs) > 1 else 0.0)
    return VolumeTable(deltas=deltas, times=times, mean_pct=mean,
                       stderr_pct=se, n_seeds=tuple(n_seeds))


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def _ordered_polygon(A: np.ndarray, b: np.ndarray):
    """Vertices of {x: Ax <= b} in R^2, ordered by angle for drawing;
    None when empty or degenerate."""
    try:
        V = vertices(HPolytope(A, b)).vertices
    except Exception:
        return None
    if V.shape[0] < 3:
        return None
    c = V.mean(axis=0)
    ang = np.arctan2(V[:, 1] - c[1], V[:, 0] - c[0])
    return V[np.argsort(ang)]


def emit_plots(out_dir) -> list:
    """Render the figures from the artifacts already on disk: the volume
    decay per delta and a state-plane view of the first run. Returns the
    list of written files; empty (with a warning) when there are no
    traces."""
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    groups = collect_traces(out_dir)
    if not groups:
        import warnings
        warnings.warn("no traces found; skipping plots")
        return []
    written = []

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for d in sorted(groups, reverse=True):
        runs = groups[d]
        t = runs[0]["t"]
        ratios = np.stack([100.0 * r["vol_theta"] / r["vol_theta"][0]
                           for r in runs])
        mean = ratios.mean(axis=0)
        se = (ratios.std(axis=0, ddof=1) / math.sqrt(len(runs))
              if len(runs) > 1 else np.zeros_like(mean))
        line, = ax.plot(t, mean, label=f"delta={d:g}")
        ax.fill_between(t, mean - se, mean + se, alpha=0.25,
                        color=line.get_color(), linewidth=0)
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("Vol(Theta_t) / Vol(Theta_0)  [%]")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    vol_path = out_dir / "volume_decay.svg"
    fig.savefig(vol_path, format="svg")
    plt.close(fig)
    written.append(vol_path)

    traj_path = _emit_trajectory(out_dir, groups, plt)
    if traj_path is not None:
        written.append(traj_path)
    return written


def _emit_trajectory(out_dir: Path, groups: dict, plt):
    """State-plane figure for the first (delta, seed) run: executed
    trajectory, constraint boundary lines, and the tube cross sections
    of the first solved problem."""
    summary_path = out_dir / "summary.json"
    d0 = sorted(groups, reverse=True)[0]
    run0 = groups[d0][0]
    if "x1" not in run0 or "x2" not in run0:
        return None
    json_path = (out_dir / f"delta-{d0:g}"
                 / f"seed-{run0['seed']:03d}.json")

    fig, ax = plt.subplots(figsize=(5.5, 5.0))
    if summary_path.exists() and json_path.exists():
        design = json.loads(summary_path.read_text()).get("design", {})
        steps = json.loads(json_path.read_text())["steps"]
        T = np.asarray(design.get("T", []), dtype=float)
        alpha0 = steps[0].get("alpha")
        if T.size and T.shape[1] == 2 and alpha0 is not None:
            for k, a_k in enumerate(np.asarray(alpha0, dtype=float)):
                poly = _ordered_polygon(T, a_k)
                if poly is None:
                    continue
                ax.fill(poly[:, 0], poly[:, 1], facecolor="tab:blue",
                        alpha=0.08, edgecolor="tab:blue", linewidth=0.6,
                        zorder=1)
    ax.plot(run0["x1"], run0["x2"], "-o", color="tab:red", markersize=2.5,
            linewidth=1.0, label="trajectory", zorder=3)
    ax.plot(run0["x1"][0], run0["x2"][0], "s", color="black", markersize=6,
            label="x0", zorder=4)

    cfg_doc = (json.loads(summary_path.read_text()).get("config", {})
               if summary_path.exists() else {})
    F = np.asarray(cfg_doc.get("constraints", {}).get("F", []), dtype=float)
    if F.size:
        xlim = ax.get_xlim()
        ylim = ax.get_ylim()
        for row in np.atleast_2d(F):
            if abs(row[0]) > 1e-12 and abs(row[1]) <= 1e-12:
                ax.axvline(1.0 / row[0], color="gray", linestyle="--",
                           linewidth=1.0, zorder=2)
            elif abs(row[1]) > 1e-12 and abs(row[0]) <= 1e-12:
                ax.axhline(1.0 / row[1], color="gray", linestyle="--",
                           linewidth=1.0, zorder=2)
            elif abs(row[0]) > 1e-12:
                xs = np.array(xlim)
                ax.plot(xs, (1.0 - row[0] * xs) / row[1], color="gray",
                        linestyle="--", linewidth=1.0, zorder=2)
        ax.set_xlim(xlim)
        ax.set_ylim(ylim)
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = out_dir / "trajectory.svg"
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
