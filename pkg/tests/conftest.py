import numpy as np
import pytest


def central_diff(f, x, h=1e-6):
    """Central finite differences of a scalar function, one coordinate at
    a time. The step matches the gradient-check tolerances used across the
    suite (relative 1e-5 with absolute floor 1e-8)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-5, atol=1e-8):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
