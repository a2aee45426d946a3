"""Fused elementwise kernels for the hot training paths.

The batch-norm + activation composite touches tens of MB per call, and
separate numpy passes are memory-bound; these kernels fuse the affine and
activation math into single passes. They are pure elementwise maps (no
reductions), so execution order cannot affect results and the parallel
variants are bit-deterministic. Small arrays dispatch to serial variants
because the thread-pool launch overhead would dominate.

If numba is unavailable the numpy fallbacks keep everything working, just
slower; ``USING_NUMBA`` reports which path is active.
"""

from __future__ import annotations

import numpy as np

ACT_IDENTITY = 0
ACT_ELU = 1
ACT_SIGMOID = 2
ACT_LEAKY = 3

# Below this many elements the serial kernels win (thread launch overhead).
_PARALLEL_MIN = 4_000_000

try:  # pragma: no cover - exercised indirectly
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USING_NUMBA = _HAVE_NUMBA


def _np_act(v, act_id, alpha):
    if act_id == ACT_ELU:
        return np.where(v > 0.0, v, np.expm1(np.minimum(v, 0.0))).astype(np.float32)
    if act_id == ACT_SIGMOID:
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out
    if act_id == ACT_LEAKY:
        return np.where(v > 0.0, v, alpha * v).astype(np.float32)
    return v


def _np_act_grad_from_y(y, act_id, alpha):
    if act_id == ACT_ELU:
        return np.where(y > 0.0, np.float32(1.0), y + np.float32(1.0))
    if act_id == ACT_SIGMOID:
        return y * (1.0 - y)
    if act_id == ACT_LEAKY:
        return np.where(y > 0.0, np.float32(1.0), np.float32(alpha))
    return np.ones_like(y)


if _HAVE_NUMBA:
    from numba import njit, prange

    def _bn_act_fwd_src(parallel):
        rng_fn = prange if parallel else range

        def kernel(x, inv, muinv, gamma, beta, alpha, act_id, xn, y):
            n, c = x.shape
            for i in rng_fn(n):
                for j in range(c):
                    z = x[i, j] * inv[j] - muinv[j]
                    xn[i, j] = z
                    v = z * gamma[j] + beta[j]
                    if act_id == 1:
                        y[i, j] = v if v > 0.0 else np.expm1(v)
                    elif act_id == 2:
                        if v >= 0.0:
                            y[i, j] = 1.0 / (1.0 + np.exp(-v))
                        else:
                            ev = np.exp(v)
                            y[i, j] = ev / (1.0 + ev)
                    elif act_id == 3:
                        y[i, j] = v if v > 0.0 else alpha * v
                    else:
                        y[i, j] = v

        return kernel

    def _affine_act_src(parallel):
        rng_fn = prange if parallel else range

        def kernel(x, a, b, alpha, act_id, y):
            n, c = x.shape
            for i in rng_fn(n):
                for j in range(c):
                    v = x[i, j] * a[j] + b[j]
                    if act_id == 1:
                        y[i, j] = v if v > 0.0 else np.expm1(v)
                    elif act_id == 2:
                        if v >= 0.0:
                            y[i, j] = 1.0 / (1.0 + np.exp(-v))
                        else:
                            ev = np.exp(v)
                            y[i, j] = ev / (1.0 + ev)
                    elif act_id == 3:
                        y[i, j] = v if v > 0.0 else alpha * v
                    else:
                        y[i, j] = v

        return kernel

    def _act_grad_src(parallel):
        rng_fn = prange if parallel else range

        def kernel(y, g, alpha, act_id, out):
            n, c = y.shape
            for i in rng_fn(n):
                for j in range(c):
                    if act_id == 1:
                        d = 1.0 if y[i, j] > 0.0 else y[i, j] + 1.0
                    elif act_id == 2:
                        d = y[i, j] * (1.0 - y[i, j])
                    elif act_id == 3:
                        d = 1.0 if y[i, j] > 0.0 else alpha
                    else:
                        d = 1.0
                    out[i, j] = g[i, j] * d

        return kernel

    def _bn_dx_src(parallel):
        rng_fn = prange if parallel else range

        def kernel(gv, xn, gamma, inv, m1, m2, out):
            n, c = gv.shape
            for i in rng_fn(n):
                for j in range(c):
                    out[i, j] = (gv[i, j] * gamma[j] - m1[j] - xn[i, j] * m2[j]) * inv[j]

        return kernel

    _nb_bn_fwd_p = njit(parallel=True, cache=True)(_bn_act_fwd_src(True))
    _nb_bn_fwd_s = njit(parallel=False, cache=True)(_bn_act_fwd_src(False))
    _nb_aff_p = njit(parallel=True, cache=True)(_affine_act_src(True))
    _nb_aff_s = njit(parallel=False, cache=True)(_affine_act_src(False))
    _nb_ag_p = njit(parallel=True, cache=True)(_act_grad_src(True))
    _nb_ag_s = njit(parallel=False, cache=True)(_act_grad_src(False))
    _nb_dx_p = njit(parallel=True, cache=True)(_bn_dx_src(True))
    _nb_dx_s = njit(parallel=False, cache=True)(_bn_dx_src(False))


def bn_act_fwd_train(x2d, inv, muinv, gamma, beta, alpha, act_id):
    """Return (xn, y) with xn = x*inv - muinv and y = act(xn*gamma + beta)."""
    if _HAVE_NUMBA:
        xn = np.empty_like(x2d)
        y = np.empty_like(x2d)
        fn = _nb_bn_fwd_p if x2d.size >= _PARALLEL_MIN else _nb_bn_fwd_s
        fn(x2d, inv, muinv, gamma, beta, np.float32(alpha), act_id, xn, y)
        return xn, y
    xn = x2d * inv - muinv
    y = _np_act(xn * gamma + beta, act_id, alpha)
    return xn, y


def affine_act_fwd(x2d, a, b, alpha, act_id):
    """Return act(x*a + b) with per-channel a, b."""
    if _HAVE_NUMBA:
        y = np.empty_like(x2d)
        fn = _nb_aff_p if x2d.size >= _PARALLEL_MIN else _nb_aff_s
        fn(x2d, a, b, np.float32(alpha), act_id, y)
        return y
    return _np_act(x2d * a + b, act_id, alpha)


def act_grad_from_y(y2d, g2d, alpha, act_id):
    """Upstream grad times the activation derivative, recovered from y."""
    if _HAVE_NUMBA:
        out = np.empty_like(y2d)
        fn = _nb_ag_p if y2d.size >= _PARALLEL_MIN else _nb_ag_s
        fn(y2d, g2d, np.float32(alpha), act_id, out)
        return out
    return (g2d * _np_act_grad_from_y(y2d, act_id, alpha)).astype(np.float32)


def bn_dx(gv2d, xn2d, gamma, inv, m1, m2):
    """dx for train-mode batch norm: (gv*gamma - m1 - xn*m2) * inv."""
    if _HAVE_NUMBA:
        out = np.empty_like(gv2d)
        fn = _nb_dx_p if gv2d.size >= _PARALLEL_MIN else _nb_dx_s
        fn(gv2d, xn2d, gamma, inv, m1, m2, out)
        return out
    return ((gv2d * gamma - m1 - xn2d * m2) * inv).astype(np.float32)
