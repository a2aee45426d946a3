"""Shared test utilities: finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np


def finite_diff_grad(fn, param, h=1e-3):
    """Central finite differences of a scalar fn() w.r.t. a leaf tensor.

    fn must rebuild its graph on every call and return a float; `param.data`
    is perturbed in place one element at a time.
    """
    base = param.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_close(ad, fd, rel=1e-3, abs_floor=2e-2):
    """Elementwise |ad - fd| <= rel * (|fd| + abs_floor)."""
    ad = np.asarray(ad, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    err = np.abs(ad - fd)
    tol = rel * (np.abs(fd) + abs_floor)
    worst = np.argmax(err - tol)
    assert np.all(err <= tol), (
        f"gradient mismatch at flat index {worst}: ad={ad.ravel()[worst]} fd={fd.ravel()[worst]}"
    )
