import numpy as np
import pytest

from convexmenu import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def leaf(value):
    return ad.Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar numpy function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g
