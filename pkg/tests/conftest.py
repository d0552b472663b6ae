import numpy as np
import pytest

from scripts.models import build_toy, one_step_prior
from scripts.utils import make_rng

# posterior of the linear toy: prior N(0, 25) after prediction, R = 10, y = 30
LINEAR_POST_MEAN = 30.0 * (1 / (1 / 25 + 1 / 10)) / 10
LINEAR_POST_VAR = 1 / (1 / 25 + 1 / 10)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def linear_toy():
    model, prev, y = build_toy('linear1d')
    return model, prev, y, one_step_prior(model, prev)


def toy(name):
    model, prev, y = build_toy(name)
    return model, prev, y, one_step_prior(model, prev)


def fd_gradient(f, x, h=1e-5):
    """Central differences of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_jacobian(f, x, h=1e-5):
    """Central differences of a vector function; rows index outputs."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)
