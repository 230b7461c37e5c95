import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cn(rng, size, var=1.0):
    """Circular complex Gaussian draws (test-side, independent of the package helper)."""
    return np.sqrt(var / 2) * (rng.normal(size=size) + 1j * rng.normal(size=size))
