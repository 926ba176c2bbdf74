"""Shared oracles and fixtures."""

import numpy as np
import pytest

from inertial_dr import data, model
from inertial_dr.geom import ExtendedPose, exp_so3
from inertial_dr.model import FilterState


def expm_series(A, terms: int = 30) -> np.ndarray:
    """Matrix exponential by scaling and squaring of a truncated Taylor series."""
    A = np.asarray(A, dtype=float)
    norm = np.linalg.norm(A, 1)
    s = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0 else 0
    B = A / 2.0**s
    out = np.eye(len(A))
    term = np.eye(len(A))
    for k in range(1, terms):
        term = term @ B / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def random_rotation(rng) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0, np.pi))


def random_state(rng, lever: float = 0.5) -> FilterState:
    return FilterState(
        ExtendedPose(random_rotation(rng), rng.normal(0, 5, 3), rng.normal(0, 50, 3)),
        rng.normal(0, 1e-2, 3),
        rng.normal(0, 1e-1, 3),
        exp_so3(rng.normal(0, 0.05, 3)),
        rng.normal(0, lever, 3),
    )


def gt_initial_state(seq) -> FilterState:
    return model.initial_state(ExtendedPose(seq.gt_rot[0], seq.gt_vel[0], seq.gt_pos[0]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def noiseless_loop():
    return data.generate_synthetic(data.urban_loop_spec(), seed=0)


@pytest.fixture(scope="session")
def circle():
    return data.generate_synthetic(data.circle_spec(), seed=0)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
