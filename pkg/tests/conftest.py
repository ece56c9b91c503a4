import numpy as np
import pytest
from scipy.special import expit

from mlmgof.data import LevelEffects, ModelSpec, RandomEffectsSpec, from_arrays


def two_level_data(n_clusters=40, size=15, sd_int=0.8, sd_slope=0.4, seed=0):
    rng = np.random.default_rng(seed)
    N = n_clusters * size
    g = np.repeat(np.arange(n_clusters), size)
    x1 = rng.uniform(-2, 2, N)
    x2 = (rng.random(N) < 0.5).astype(float)
    u = rng.normal(0, sd_int, n_clusters)
    w = rng.normal(0, sd_slope, n_clusters)
    eta = -0.5 + 0.7 * x1 + 0.4 * x2 + u[g] + w[g] * x2
    y = (rng.random(N) < expit(eta)).astype(float)
    return from_arrays(y, g, None, {"x1": x1, "x2": x2})


@pytest.fixture(scope="session")
def small_two_level():
    ds = two_level_data()
    spec = ModelSpec(("x1", "x2"), RandomEffectsSpec(LevelEffects(True, ("x2",))))
    return ds, spec


@pytest.fixture(scope="session")
def small_three_level():
    rng = np.random.default_rng(5)
    J, K, n = 12, 4, 10
    N = J * K * n
    l3 = np.repeat(np.arange(J), K * n)
    l2 = np.repeat(np.arange(J * K), n)
    x1 = rng.uniform(-3, 3, N)
    x2 = (rng.random(N) < 0.5).astype(float)
    eta = (-1 + 0.5 * x1 + 0.3 * x2 + rng.normal(0, 0.6, J)[l3]
           + rng.normal(0, 0.6, J * K)[l2] + rng.normal(0, 0.4, J * K)[l2] * x2)
    y = (rng.random(N) < expit(eta)).astype(float)
    ds = from_arrays(y, l2, l3, {"x1": x1, "x2": x2})
    spec = ModelSpec(("x1", "x2"), RandomEffectsSpec(LevelEffects(True, ("x2",)),
                                                     LevelEffects(True, ())))
    return ds, spec


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
