import numpy as np
import pytest

from linboltz.geometry import DomainSpec, PotentialSpec, build_grid


@pytest.fixture(scope="session")
def torus1():
    """Small 1-D torus grid used by the fast unit tests."""
    return build_grid(DomainSpec("torus", 1), 6.0, 48, 48)


@pytest.fixture(scope="session")
def zero1():
    return PotentialSpec.zero(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
