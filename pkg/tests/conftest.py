import numpy as np
import pytest

from flair.model import Dataset, FactorState, PriorConfig
from flair.simeval import SimConfig, simulate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_instance(rng, n=30, p=12, k=2, q=2, masked=0.0, scale=0.7):
    """Small random dataset plus a feasible state and random prior scales."""
    X = np.ones((n, q))
    X[:, 1:] = rng.standard_normal((n, q - 1))
    state = FactorState(
        M=rng.uniform(-1.5, 1.5, (n, k)),
        Lam=scale * rng.standard_normal((p, k)),
        B=scale * rng.standard_normal((p, q)),
    )
    Y = (rng.uniform(size=(n, p)) < 0.5).astype(float)
    mask = rng.uniform(size=(n, p)) < masked if masked else None
    prior = PriorConfig(k=k, tau_lambda=rng.uniform(0.5, 3, p), tau_B=rng.uniform(0.5, 3, p))
    return Dataset(Y=Y, X=X, mask=mask), state, prior


@pytest.fixture(scope="session")
def small_sim():
    return simulate_dataset(SimConfig(n=120, p=60, k=2, q=2, spike_prob=0.0, seed=5))


# Filled by test_acceptance; echoed at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
