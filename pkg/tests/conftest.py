import numpy as np
import pytest

from petnet.rng import Stream


@pytest.fixture
def stream():
    return Stream(1234)


def randn(shape, seed=0):
    return Stream(seed).normal(int(np.prod(shape))).reshape(shape)
