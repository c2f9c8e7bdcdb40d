"""Shared fixtures: the second-order benchmark plant and its offline tube
design, built once per session."""

import numpy as np
import pytest

from sttmpc.estimation import Parametrization, Schedule
from sttmpc.geometry import Box, vertices
from sttmpc.simulation import PlantConfig
from sttmpc.tube import design_tube


class Bench:
    """Benchmark problem bundle used across the test modules."""

    def __init__(self):
        self.A_star = np.array([[0.6, 0.2], [-0.1, 0.4]])
        self.B_star = np.array([[1.0], [0.6]])
        self.sigma = 0.01
        self.par = Parametrization.free_A(self.B_star)
        self.theta_star = np.array([0.6, 0.2, -0.1, 0.4])
        self.theta0 = np.array([0.57, 0.17, -0.12, 0.42])
        self.Theta0 = Box(self.theta0 - 0.07, self.theta0 + 0.07)
        self.K = np.array([[-0.426, -0.290]])
        self.F = np.array([[-1 / 0.15, 0.0], [0.0, -1 / 1.1], [0.0, 0.0]])
        self.G = np.array([[0.0], [0.0], [2.0]])
        self.lam = 0.999
        self.N = 10
        self.Q = np.eye(2)
        self.R = np.eye(1)
        self.x0 = np.array([6.0, 3.0])
        self.W = Box(np.array([-0.03, -0.03]), np.array([0.03, 0.03]))
        self.plant = PlantConfig(self.A_star, self.B_star, self.sigma, self.W)

    def schedule(self, delta):
        return Schedule(delta=delta, sigma=self.sigma)

    def theta_vertices(self):
        return vertices(self.Theta0).vertices


@pytest.fixture(scope="session")
def bench():
    return Bench()


@pytest.fixture(scope="session")
def bench_design(bench):
    return design_tube(bench.par, bench.theta_vertices(), bench.F, bench.G,
                       bench.K, bench.lam, bench.N, bench.Q, bench.R)
