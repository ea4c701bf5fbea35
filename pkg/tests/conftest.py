import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from allocator.market_model import CALIBRATED_PARAMS, HestonModel

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def params():
    return CALIBRATED_PARAMS


@pytest.fixture
def heston(params):
    return HestonModel(params)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
