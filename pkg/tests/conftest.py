import numpy as np
import pytest
from hypothesis import settings

from clipa import autodiff as ad

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rs():
    return np.random.default_rng(1234)
