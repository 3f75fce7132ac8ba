import numpy as np
import pytest

from elseg import volgrad as vg


def numeric_grad(f, x, h=1e-3):
    """Central finite differences of scalar ``f`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64, order="C")
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def projected(y: vg.Tensor, weights: np.ndarray) -> vg.Tensor:
    """Scalar ``sum(y * weights)``: a generic loss for checking vector-valued ops."""
    return vg.scalar_loss(y, lambda a: (float(np.sum(a * weights)), weights))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
