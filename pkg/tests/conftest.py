import numpy as np
import pytest

from app.services.model import Instance, canonical_instance


@pytest.fixture
def n_instance():
    """N model, two periods, one slot of each type, no idle periods."""
    return canonical_instance("N", [0.5, 0.5], 2, [1, 1])


@pytest.fixture
def m_instance():
    return canonical_instance("M", [0.5, 0.5], 4, [2, 2, 2])


@pytest.fixture
def w_instance():
    return canonical_instance("W", [1 / 3, 1 / 3, 1 / 3], 6, [3, 3])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_random_instance(seed: int, n_slots: int = 3, max_capacity: int = 3, max_horizon: int = 6) -> Instance:
    """Small random instance: distinct nonzero preference rows, Σλ in [0.6, 1], positive total capacity."""
    gen = np.random.default_rng(seed)
    n_rows = (1 << n_slots) - 1
    size = int(gen.integers(1, n_rows + 1))
    rows = gen.choice(np.arange(1, n_rows + 1), size=size, replace=False)
    omega = ((rows[:, None] >> np.arange(n_slots)) & 1).astype(np.int64)
    lam = gen.dirichlet(np.ones(size)) * gen.uniform(0.6, 1.0)
    capacity = gen.integers(0, max_capacity + 1, size=n_slots)
    if capacity.sum() == 0:
        capacity[0] = 1
    horizon = int(gen.integers(1, max_horizon + 1))
    return Instance(omega=omega, lam=lam, horizon=horizon, capacity=capacity)


@pytest.fixture
def random_instance():
    return make_random_instance
