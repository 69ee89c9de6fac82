import numpy as np
import pytest

from headforge.head_prior import PriorField, make_icosphere, make_standin_head


@pytest.fixture(scope="session")
def standin_head():
    return make_standin_head(2)


@pytest.fixture(scope="session")
def prior(standin_head):
    return PriorField(standin_head)


@pytest.fixture(scope="session")
def small_head():
    return make_standin_head(1)


@pytest.fixture(scope="session")
def icosphere():
    return make_icosphere(3)


@pytest.fixture
def rng():
    return np.random.default_rng(np.random.PCG64(1234))
