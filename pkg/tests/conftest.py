import numpy as np
import pytest

from stvflow.grid import ScalarField, build_grid


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance runs")


@pytest.fixture(scope="session")
def grid8():
    return build_grid(1.0, 8)


@pytest.fixture(scope="session")
def grid16():
    return build_grid(1.0, 16)


@pytest.fixture(scope="session")
def grid32():
    return build_grid(1.0, 32)


@pytest.fixture(scope="session")
def grid64():
    return build_grid(1.0, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_field(grid, rng):
    return ScalarField(grid, rng.standard_normal((grid.n, grid.n)))


def gaussian(grid, cx=0.0, cy=0.0, width=0.1, amp=1.0):
    return ScalarField.from_function(grid, lambda x, y: amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / width))
