import numpy as np
import pytest

from ensemble_langevin.core import Ensemble, SeedSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def seeds():
    return SeedSpec(777)


@pytest.fixture
def small_ensemble(rng):
    return Ensemble(rng.standard_normal((8, 3)))
