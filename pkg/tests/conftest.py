"""Shared small fixtures; everything here is cheap to build."""

import numpy as np
import pytest

from pwl import geometry as geo
from pwl.grid import Grid


@pytest.fixture(scope="session")
def small_grid():
    return Grid(2, 12.0, 48)


@pytest.fixture(scope="session")
def euclid(small_grid):
    return geo.euclidean_field(small_grid)


@pytest.fixture(scope="session")
def torus():
    return geo.euclidean_field(Grid(2, 8.0, 64, periodic=True))


@pytest.fixture(scope="session")
def lens():
    return geo.conformal_lens_field(Grid(2, 12.0, 48))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
