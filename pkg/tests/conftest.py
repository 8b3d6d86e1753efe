import numpy as np
import pytest
from hypothesis import settings

from emagnn.data import SyntheticSpec, generate_synthetic

settings.register_profile("pkg", deadline=None, max_examples=40)
settings.load_profile("pkg")


@pytest.fixture(scope="session")
def small_cohort():
    series, planted, _ = generate_synthetic(SyntheticSpec(n_individuals=3, n_variables=8, n_timepoints=50, seed=11))
    return series, planted


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
