"""Independent float64 reference forwards used as finite-difference oracles.

Finite differences on the float32 engine forward drown in rounding noise at
h=1e-3 for sum-like ops; these plain-numpy float64 implementations compute
the same math so the FD quotient is accurate, and double as an independent
check of the engine's forward pass.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_ref(x, kernel, bias, padding="valid", stride=1):
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    kh, kw, ic, oc = kernel.shape
    n, h, w, _ = x.shape
    if padding == "same":
        oh, ow = -(-h // stride), -(-w // stride)
        th = max((oh - 1) * stride + kh - h, 0)
        tw = max((ow - 1) * stride + kw - w, 0)
        x = np.pad(x, ((0, 0), (th // 2, th - th // 2), (tw // 2, tw - tw // 2), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (n, oh, ow, c, kh, kw)
    return np.einsum("nxycij,ijco->nxyo", win, kernel, optimize=True) + bias


def batch_norm_ref(x, gamma, beta, eps, training=True, running=None):
    x = np.asarray(x, dtype=np.float64)
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mu, var = running
    xn = (x - mu) / np.sqrt(var + eps)
    return xn * np.asarray(gamma, dtype=np.float64) + np.asarray(beta, dtype=np.float64)


def elu_ref(x, alpha=1.0):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, alpha * np.expm1(x))


def mse_ref(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float((d * d).mean())
