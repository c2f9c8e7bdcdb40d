"""Online identification of the plant parameters and the uncertainty sets
built around the estimates.

The plant family is affine in a parameter vector theta: a fixed stacked
matrix [A B] with a mask marking which entries are free coordinates. The
least-squares estimate regresses successor states on (state, input) pairs,
with the known entries subtracted first. Around the point estimate sits a
confidence box whose radius follows an explicit schedule in time and the
confidence level; the running uncertainty set is the intersection of all
boxes so far, so it only ever shrinks. Decaying isotropic input noise keeps
the regression excited without destroying asymptotic performance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (Box, HPolytope, contains, intersect,
                       outer_box_of_ball, vertices)


@dataclass(frozen=True)
class Parametrization:
    """Affine entrywise map theta -> (A(theta), B(theta)).

    base holds the stacked matrix [A B] with the fixed entries filled in;
    mask is True at the entries that are free coordinates of theta, read
    row-major. The map is injective because each coordinate owns one entry.
    """

    base: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if base.ndim != 2 or base.shape != mask.shape:
            raise ValueError("base and mask must be matching 2-D arrays")
        if base.shape[1] < base.shape[0]:
            raise ValueError("stacked [A B] needs at least d_x columns")
        if not mask.any():
            raise ValueError("mask selects no free entries")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "mask", mask)

    @property
    def d_x(self) -> int:
        return self.base.shape[0]

    @property
    def d_u(self) -> int:
        return self.base.shape[1] - self.base.shape[0]

    @property
    def d_theta(self) -> int:
        return int(self.mask.sum())

    def stacked(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.size != self.d_theta:
            raise ValueError(f"theta must have {self.d_theta} entries")
        M = self.base.copy()
        M[self.mask] = theta
        return M

    def A(self, theta: np.ndarray) -> np.ndarray:
        return self.stacked(theta)[:, : self.d_x]

    def B(self, theta: np.ndarray) -> np.ndarray:
        return self.stacked(theta)[:, self.d_x:]

    def phi(self, theta: np.ndarray, K: np.ndarray) -> np.ndarray:
        """Closed-loop matrix A(theta) + B(theta) K."""
        M = self.stacked(theta)
        return M[:, : self.d_x] + M[:, self.d_x:] @ np.asarray(K, dtype=float)

    @classmethod
    def free_A(cls, B: np.ndarray) -> "Parametrization":
        """Every entry of A unknown, B known exactly."""
        B = np.atleast_2d(np.asarray(B, dtype=float))
        d_x = B.shape[0]
        base = np.hstack([np.zeros((d_x, d_x)), B])
        mask = np.hstack([np.ones((d_x, d_x), dtype=bool),
                          np.zeros_like(B, dtype=bool)])
        return cls(base, mask)


def matrix_norm_dist(theta1: np.ndarray, theta2: np.ndarray,
                     par: Parametrization) -> float:
    """Parameter distance as the larger spectral norm of the A and B
    differences."""
    M1 = par.stacked(theta1)
    M2 = par.stacked(theta2)
    d_x = par.d_x
    dA = np.linalg.norm(M1[:, :d_x] - M2[:, :d_x], ord=2)
    dB = np.linalg.norm(M1[:, d_x:] - M2[:, d_x:], ord=2) if par.d_u else 0.0
    return float(max(dA, dB))


def ball_in_set(center: np.ndarray, radius: float, Theta,
                par: Parametrization, n_directions: int,
                rng: np.random.Generator, tol: float = 1e-9) -> bool:
    """Sampled check that the matrix-norm ball around center sits inside
    Theta: n_directions random points on the radius-r sphere must all be
    members. Directions are Gaussian in parameter space, rescaled so the
    induced matrix distance is exactly the radius."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    for _ in range(n_directions):
        d = rng.normal(size=center.size)
        dist = matrix_norm_dist(center + d, center, par)
        if dist == 0.0:
            continue
        if not contains(Theta, center + (radius / dist) * d, tol=tol):
            return False
    return True


# ---------------------------------------------------------------------------
# Least squares
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorState:
    """Running sums for the regression of x_{s+1} on y_s = (x_s; u_s):
    gram = sum of y yT, cross = sum of x_next yT, count = transitions."""

    gram: np.ndarray
    cross: np.ndarray
    count: int

    @staticmethod
    def empty(d_x: int, d_u: int) -> "EstimatorState":
        n = d_x + d_u
        return EstimatorState(np.zeros((n, n)), np.zeros((d_x, n)), 0)


def lse_update(state: EstimatorState, x: np.ndarray, u: np.ndarray,
               x_next: np.ndarray) -> EstimatorState:
    """Fold one observed transition into the running sums."""
    y = np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)),
                        np.atleast_1d(np.asarray(u, dtype=float))])
    xn = np.atleast_1d(np.asarray(x_next, dtype=float))
    if y.size != state.gram.shape[0] or xn.size != state.cross.shape[0]:
        raise ValueError("transition dimensions do not match the state")
    return EstimatorState(state.gram + np.outer(y, y),
                          state.cross + np.outer(xn, y),
                          state.count + 1)


_SV_CUTOFF = 1e-10


def lse_point(state: EstimatorState, par: Parametrization):
    """Least-squares point estimate of theta, solved row by row over the
    free entries with the known entries subtracted from the data first.

    The normal equations are solved as minimum-norm least squares with a
    singular-value cutoff of 1e-10 times the largest singular value, so an
    unexcited estimator returns the minimum-norm solution instead of
    blowing up. Returns (theta_hat, rank_deficient); the flag is set when
    any row block of the gram matrix is singular at the cutoff. Meaningful
    from one transition on; callers that need a trustworthy point should
    wait for at least two.
    """
    if state.count < 1:
        raise ValueError("lse_point requires at least one transition")
    theta = np.empty(par.d_theta)
    deficient = False
    pos = 0
    for i in range(par.d_x):
        f = par.mask[i]
        nf = int(f.sum())
        if nf == 0:
            continue
        k = ~f
        G = state.gram[np.ix_(f, f)]
        rhs = state.cross[i, f] - par.base[i, k] @ state.gram[np.ix_(k, f)]
        sol, _, rank, _ = np.linalg.lstsq(G, rhs, rcond=_SV_CUTOFF)
        if rank < nf:
            deficient = True
        theta[pos:pos + nf] = sol
        pos += nf
    return theta, deficient


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Constants of the confidence-radius and excitation schedules.

    delta is the confidence level, alpha the decay exponent shared by the
    radius and the excitation noise, c1/c2 set the warm-up horizon, c3
    scales the radius, sigma is the disturbance scale. The default
    constants were calibrated on the benchmark plant: c3 is the largest
    value whose radius still meets the set-volume targets, and the
    warm-up constants admit updates as soon as two transitions are in.
    """

    delta: float
    sigma: float
    alpha: float = 0.5
    c1: float = 2.0
    c2: float = 0.3
    c3: float = 1.2e-4

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        for name in ("c1", "c2", "c3", "sigma"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


def epsilon(t: int, sch: Schedule) -> float:
    """Confidence radius sqrt(c3 log(t/delta) / t^(1-alpha))."""
    if t < 1:
        raise ValueError("t must be >= 1")
    arg = t / sch.delta
    if arg <= 1.0:
        raise ValueError("log(t/delta) must be positive")
    return math.sqrt(sch.c3 * math.log(arg) / t ** (1.0 - sch.alpha))


def t_star(sch: Schedule) -> int:
    """Warm-up horizon ceil(c1 + c2 log(1/delta)); estimates are not
    trusted before it."""
    return math.ceil(sch.c1 + sch.c2 * math.log(1.0 / sch.delta))


def sigma_t(t: int, sch: Schedule, d_x: int) -> float:
    """Excitation scale: sigma_t^2 = sqrt(d_x) sigma^2 t^(-alpha)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    return math.sqrt(math.sqrt(d_x) * sch.sigma ** 2 * t ** (-sch.alpha))


def pe_noise(t: int, sch: Schedule, par: Parametrization,
             rng: np.random.Generator) -> np.ndarray:
    """Persistent-excitation input noise: an isotropic Gaussian draw with
    scale sigma_t, radially clipped to the ball of radius 3 sigma_t."""
    s = sigma_t(t, sch, par.d_x)
    xi = rng.normal(0.0, s, size=par.d_u)
    nrm = float(np.linalg.norm(xi))
    if nrm > 3.0 * s:
        xi *= 3.0 * s / nrm
    return xi


# ---------------------------------------------------------------------------
# Uncertainty sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UncertaintyState:
    """The parameter point, the set it lives in, and bookkeeping.

    theta_vertices caches the vertex list of Theta (rows = points in
    theta-space); frozen records that the last update happened before the
    warm-up horizon; anomaly records that the last confidence box missed
    the running set entirely, in which case the set was kept as it was.
    """

    theta: np.ndarray
    Theta: Box | HPolytope
    eps: float
    theta_vertices: np.ndarray
    t_star: int
    frozen: bool
    anomaly: bool = False

    @staticmethod
    def initial(theta0: np.ndarray, Theta0, sch: Schedule) -> "UncertaintyState":
        theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
        return UncertaintyState(theta=theta0, Theta=Theta0,
                                eps=epsilon(1, sch),
                                theta_vertices=vertices(Theta0).vertices,
                                t_star=t_star(sch), frozen=True)


def update_uncertainty(U: UncertaintyState, theta_hat: np.ndarray, t: int,
                       sch: Schedule) -> UncertaintyState:
    """One step of the set-membership update.

    Before the warm-up horizon the state passes through untouched. After
    it, the point moves to the estimate and the set is intersected with
    the box around it of radius twice the current confidence radius. An
    empty intersection means the estimate contradicts the accumulated
    set; the set is then left alone and the anomaly flag raised.
    """
    if t < U.t_star:
        return U
    eps = epsilon(t, sch)
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    cap = intersect(U.Theta, outer_box_of_ball(theta_hat, 2.0 * eps))
    if cap.is_empty:
        return replace(U, theta=theta_hat, eps=eps, frozen=False, anomaly=True)
    return UncertaintyState(theta=theta_hat, Theta=cap, eps=eps,
                            theta_vertices=vertices(cap).vertices,
                            t_star=U.t_star, frozen=False, anomaly=False)
