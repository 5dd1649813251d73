import math

import numpy as np
import pytest


def scalar_kernel(sigma, alpha, beta, x, y):
    """Loop-based kernel value; shares no code with the package."""
    nx = math.sqrt(sum(v * v for v in x))
    ny = math.sqrt(sum(v * v for v in y))
    d = math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)))
    return sigma**2 * (1 + alpha * nx) * (1 + alpha * ny) / (1 + d / beta)


def dense_kernel(sigma, alpha, beta, X, Y):
    return np.array([[scalar_kernel(sigma, alpha, beta, x, y) for y in Y] for x in X])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
