import numpy as np
import pytest

from contraspeech.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_param(rng, shape, lo=-2.0, hi=2.0, dtype=np.float64):
    """Random leaf tensor; float64 by default so finite differences are quiet."""
    data = rng.uniform(lo, hi, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)
