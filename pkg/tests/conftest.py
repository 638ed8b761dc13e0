import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mirnetv2.config import ModelConfig
from mirnetv2.tensor import set_sequential

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session", autouse=True)
def _sequential():
    set_sequential(True)
    yield
    set_sequential(False)


@pytest.fixture
def tiny():
    return ModelConfig.tiny()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
