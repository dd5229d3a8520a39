import numpy as np
import pytest

from flowarm import tensor as T


@pytest.fixture(autouse=True)
def fresh_tape():
    T.clear_tape()
    yield
    T.clear_tape()


def finite_difference(f, params, h=1e-3):
    """Central-difference gradients of scalar f() w.r.t. a list of float64 arrays."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def fd_agreement(analytic, numeric, tol=1e-4):
    """Fraction of coordinates where |a - n| / (|n| + 1e-8) <= tol."""
    a = np.concatenate([x.reshape(-1) for x in analytic])
    n = np.concatenate([x.reshape(-1) for x in numeric])
    rel = np.abs(a - n) / (np.abs(n) + 1e-8)
    return float((rel <= tol).mean())
