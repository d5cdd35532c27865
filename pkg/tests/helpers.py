"""Shared test utilities: finite-difference gradient oracle and small builders."""

import numpy as np

from tabforge import nn

FD_STEP = 1e-5


def finite_diff_grads(loss_fn, store):
    """Central finite differences of a scalar loss over every store parameter.

    `loss_fn` must recompute the forward pass from the current parameter
    values and return a float. Step 1e-5 in float64.
    """
    grads = {}
    for name, p in store.params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            hi = loss_fn()
            flat[i] = orig - FD_STEP
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * FD_STEP)
        grads[name] = g
    return grads


def assert_grads_close(analytic, numeric, rel=1e-4, atol=1e-7):
    """Elementwise |a - n| <= atol + rel * |n| between two gradient dicts.

    The absolute floor covers central-difference roundoff (~1e-11 per eval at
    step 1e-5 on an O(1) loss), which otherwise dominates near-zero gradients.
    """
    assert set(analytic) == set(numeric)
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        bad = np.abs(a - n) > atol + rel * np.abs(n)
        assert not bad.any(), (
            f"grad mismatch for {name}: max abs err {np.abs(a - n).max():.3e}, "
            f"ref magnitude {np.abs(n).max():.3e}")


def uniform_params(store, name, shape, rng, bound=None):
    """Register a uniform(-bound, bound) parameter, default fan-in scaling."""
    if bound is None:
        bound = 1.0 / np.sqrt(shape[0])
    return store.create(name, rng.uniform(-bound, bound, size=shape))
