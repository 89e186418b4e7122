"""Central finite-difference helpers shared by the gradient tests."""
import numpy as np

from epd_sgg.numcore import Tensor, float64_oracle

STEP = 1e-3
TOL = 1e-4


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad_array(f, x, h=STEP):
    """d f(x) / dx for a float64 reference function ``f`` of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def numeric_grad_tensor(f, tensor: Tensor, h=STEP):
    """d f() / d tensor where ``f`` runs our own ops; evaluated in float64."""
    orig = tensor.value
    base = orig.astype(np.float64)
    g = np.zeros_like(base)
    try:
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1, -1):
                v = base.copy()
                v[idx] += sign * h
                tensor.value = v
                with float64_oracle():
                    vals.append(float(f()))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
    finally:
        tensor.value = orig
    return g
