import sys

import numpy as np
import pytest

from ctsfm import lie, simulator
from ctsfm.splines import KnotGrid
from ctsfm.trajectory import Trajectory


def random_quats(rng, n, scale=0.3):
    """Smoothly varying control quaternions (adjacent angles well below pi)."""
    w = np.cumsum(rng.normal(scale=scale, size=(n, 3)), axis=0)
    return lie.quat_exp(w)


def random_trajectory(kind, rng, count=10, dt=0.1, t0=0.0, rotating=True, scale=0.3):
    grid = KnotGrid(t0, dt, count)
    q = random_quats(rng, count, scale) if rotating else np.tile(lie.quat_exp(rng.normal(size=3)), (count, 1))
    p = rng.normal(size=(count, 3))
    return Trajectory.create(kind, grid, q, p)


def interior_times(traj, n, rng, margin=1e-3):
    lo, hi = traj.support
    return rng.uniform(lo + margin, hi - margin, n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def noise_free_short():
    cfg = simulator.SimConfig(seed=1, duration=2.0, sigma_image=0.0, sigma_imu=0.0)
    return simulator.simulate("free", cfg, imu_noise=False)


@pytest.fixture(scope="session")
def noisy_short():
    cfg = simulator.SimConfig(seed=2, duration=2.0)
    return simulator.simulate("free", cfg)


def away_from_knots(grid, n, rng, lo=0.05, hi=0.95):
    """Times whose finite-difference stencils stay inside one spline segment."""
    seg = rng.integers(0, grid.count - 3, n)
    return grid.t0 + (seg + 1 + rng.uniform(lo, hi, n)) * grid.dt


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[number])
