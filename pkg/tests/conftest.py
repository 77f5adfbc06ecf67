import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from poevi.poe_model import Expert, ExpertPool, PoEDensity

settings.register_profile("ci", deadline=None, max_examples=40)
settings.load_profile("ci")

TESTS_DIR = Path(__file__).parent
ECHO_SERVER = [sys.executable, str(TESTS_DIR / "echo_quadratic.py")]


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def skew_heavy_tail_poe():
    """Three experts along the diagonal with mixed anisotropy."""
    return PoEDensity(
        [Expert([-1.0, -1.0], [[1.0, 0.0], [0.0, 1 / 3]]),
         Expert([0.0, 0.0], [[1 / 3, 0.5], [0.5, 1.0]]),
         Expert([1.0, 1.0], [[1 / 3, 0.0], [0.0, 1.0]])],
        [1.0, 1.2, 1.0],
    )


def anisotropic_poe():
    """Two co-located experts, each nearly flat along a different axis."""
    return PoEDensity(
        [Expert([0.0, 0.0], [[1.0, 0.0], [0.0, 1 / 500]]),
         Expert([0.0, 0.0], [[1 / 500, 0.0], [0.0, 1.0]])],
        [2.0, 2.0],
    )


def sparse_poe(seed):
    """100 random experts, 30 weighted 0.25 and 70 weighted 1e-12, shuffled."""
    rng = np.random.default_rng(seed)
    experts = []
    for _ in range(100):
        lam = rng.uniform(0.05, 2.0, 2)
        r = rotation(rng.uniform(0, 2 * np.pi))
        experts.append(Expert(rng.uniform(-5, 5, 2), r @ np.diag(lam) @ r.T))
    alpha = np.r_[np.full(30, 0.25), np.full(70, 1e-12)]
    rng.shuffle(alpha)
    return PoEDensity(experts, alpha)


def random_pool(rng, k, d, spread=2.0):
    experts = []
    for _ in range(k):
        a = rng.normal(size=(d, d))
        experts.append(Expert(rng.normal(scale=spread, size=d), a @ a.T / d + 0.2 * np.eye(d)))
    return ExpertPool(experts)


def random_poe(rng, k, d):
    pool = random_pool(rng, k, d)
    alpha = rng.uniform(0.3, 1.5, k)
    alpha *= max(1.0, (d / 2 + 0.3) / alpha.sum())
    return PoEDensity(pool, alpha)


def two_point_poe():
    return PoEDensity([Expert([-1.0], [[1.0]]), Expert([1.0], [[1.0]])], [1.0, 1.0])


def cauchy_poe():
    return PoEDensity([Expert([0.0], [[1.0]])], [1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
