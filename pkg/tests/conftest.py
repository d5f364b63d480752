import numpy as np
import pytest

from protomoe.tensor import Tensor


@pytest.fixture
def gen():
    return np.random.Generator(np.random.Philox(key=12345))


def rand_tensor(gen, *shape, requires_grad=True, scale=1.0):
    return Tensor(gen.standard_normal(shape) * scale, requires_grad=requires_grad)
