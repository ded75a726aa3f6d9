import numpy as np
import pytest

from hysteresis.timegrid import make_grid, sample_brownian


@pytest.fixture(scope="session")
def grid64():
    return make_grid(1.0, 64)


@pytest.fixture(scope="session")
def ens64(grid64):
    return sample_brownian(grid64, 4000, seed=101)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
