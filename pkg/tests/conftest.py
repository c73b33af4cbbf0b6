import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("gmlab", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("gmlab")


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)
