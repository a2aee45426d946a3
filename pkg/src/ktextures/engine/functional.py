"""Differentiable operations over :class:`~ktextures.engine.tensor.Tensor`.

Image tensors are NHWC float32. Every op validates its preconditions,
computes eagerly with numpy, and registers a backward closure only when some
input requires gradients. Loss reductions accumulate in float64 and return
float32 scalars.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .layers import BatchNormParams, ConvParams
from .tensor import GraphError, ParamError, ShapeError, Tensor, make_result

_ACT_IDS = {
    "identity": _kernels.ACT_IDENTITY,
    "elu": _kernels.ACT_ELU,
    "sigmoid": _kernels.ACT_SIGMOID,
    "leaky_relu": _kernels.ACT_LEAKY,
}

# Row-sparsity threshold for the 1x1-conv backward gather path.
_SPARSE_MIN_ROWS = 1 << 16


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bk(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(g, b.data.shape))

    return make_result(out, (a, b), bk)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bk(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(-g, b.data.shape))

    return make_result(out, (a, b), bk)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bk(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(g * a.data, b.data.shape))

    return make_result(out, (a, b), bk)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is 1 strictly inside (lo, hi) and 0 outside."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def bk(g, accum):
        accum(x, g * inside)

    return make_result(out, (x,), bk)


def stack(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    base = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != base:
            raise ShapeError(f"stack: mismatched shapes {base} vs {t.data.shape}")
    out = np.stack([t.data for t in ts], axis=axis)

    def bk(g, accum):
        for i, t in enumerate(ts):
            if t.requires_grad:
                accum(t, np.take(g, i, axis=axis))

    return make_result(out, tuple(ts), bk)


# ---------------------------------------------------------------------------
# convolution


def _same_pads(size: int, k: int, stride: int):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, p: ConvParams, padding: str = "valid", stride: int = 1) -> Tensor:
    """2-D convolution, NHWC input, (kh, kw, in_ch, out_ch) kernel."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.data.shape}")
    kh, kw, ic, oc = p.kernel.data.shape
    n, h, w, c = x.data.shape
    if c != ic:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs kernel {p.kernel.data.shape}"
        )
    if padding not in ("valid", "same"):
        raise ParamError(f"unknown padding {padding!r}")
    if stride < 1:
        raise ParamError("stride must be >= 1")

    kern, bias = p.kernel, p.bias

    if kh == 1 and kw == 1 and stride == 1:
        x2 = x.data.reshape(-1, ic)
        k2 = kern.data.reshape(ic, oc)
        out = (x2 @ k2 + bias.data).reshape(n, h, w, oc)

        def bk(g, accum):
            g2 = np.ascontiguousarray(g.reshape(-1, oc))
            rows = None
            if g2.shape[0] >= _SPARSE_MIN_ROWS:
                if not g2.any():
                    return
                mask = np.any(g2 != 0.0, axis=1)
                nz = int(np.count_nonzero(mask))
                if nz < g2.shape[0] // 8:
                    rows = np.nonzero(mask)[0]
            if kern.requires_grad or bias.requires_grad:
                if rows is None:
                    dk = x2.T @ g2
                    db = g2.sum(axis=0)
                else:
                    gs = g2[rows]
                    dk = x2[rows].T @ gs
                    db = gs.sum(axis=0)
                if kern.requires_grad:
                    accum(kern, dk.reshape(kern.data.shape))
                if bias.requires_grad:
                    accum(bias, db.astype(np.float32))
            if x.requires_grad:
                if rows is None:
                    dx = g2 @ k2.T
                else:
                    dx = np.zeros((g2.shape[0], ic), dtype=np.float32)
                    dx[rows] = g2[rows] @ k2.T
                accum(x, dx.reshape(x.data.shape))

        return make_result(out, (x, kern, bias), bk)

    if padding == "same":
        ph0, ph1 = _same_pads(h, kh, stride)
        pw0, pw1 = _same_pads(w, kw, stride)
        xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    else:
        if h < kh or w < kw:
            raise ShapeError(
                f"conv2d valid padding needs input >= kernel: {x.data.shape} vs {p.kernel.data.shape}"
            )
        ph0 = pw0 = 0
        xp = x.data
    hp, wp = xp.shape[1], xp.shape[2]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (n, oh, ow, c, kh, kw) -> (n*oh*ow, kh*kw*c), matching kernel layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * ic)
    k2 = kern.data.reshape(kh * kw * ic, oc)
    out = (cols @ k2 + bias.data).reshape(n, oh, ow, oc)

    def bk(g, accum):
        g2 = np.ascontiguousarray(g.reshape(-1, oc))
        if g2.shape[0] >= _SPARSE_MIN_ROWS and not g2.any():
            return
        if kern.requires_grad:
            accum(kern, (cols.T @ g2).reshape(kern.data.shape))
        if bias.requires_grad:
            accum(bias, g2.sum(axis=0).astype(np.float32))
        if x.requires_grad:
            dcols = (g2 @ k2.T).reshape(n, oh, ow, kh, kw, ic)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dcols[
                        :, :, :, i, j, :
                    ]
            if xp is x.data:
                accum(x, dxp)
            else:
                accum(x, dxp[:, ph0 : ph0 + h, pw0 : pw0 + w, :])

    return make_result(out, (x, kern, bias), bk)


# ---------------------------------------------------------------------------
# batch normalization


def _bn_axes(x: np.ndarray):
    return tuple(range(x.ndim - 1))


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Channel-wise batch normalization (channels-last layout).

    Train mode normalizes by batch statistics and updates the running
    estimates in place; infer mode normalizes by the running estimates.
    """
    x = as_tensor(x)
    ch = x.data.shape[-1]
    if ch != p.gamma.data.shape[0]:
        raise ShapeError(f"batch_norm channel mismatch: {x.data.shape} vs {ch_shape(p)}")
    axes = _bn_axes(x.data)
    m = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    if m == 0:
        raise ParamError("batch_norm on an empty batch")

    gamma, beta = p.gamma, p.beta
    if training:
        mu64 = x.data.mean(axis=axes, dtype=np.float64)
        var64 = x.data.var(axis=axes, dtype=np.float64)
        p.update_running(mu64, var64)
        mu = mu64.astype(np.float32)
        inv = (1.0 / np.sqrt(var64 + p.epsilon)).astype(np.float32)
        xn = (x.data - mu) * inv
        out = xn * gamma.data + beta.data

        def bk(g, accum):
            g2 = g.reshape(-1, ch)
            xn2 = xn.reshape(-1, ch)
            if gamma.requires_grad:
                accum(gamma, np.einsum("ij,ij->j", g2, xn2, dtype=np.float64).astype(np.float32))
            if beta.requires_grad:
                accum(beta, g.sum(axis=axes, dtype=np.float64).astype(np.float32))
            if x.requires_grad:
                dxh = g * gamma.data
                s1 = dxh.mean(axis=axes, dtype=np.float64).astype(np.float32)
                d2 = dxh.reshape(-1, ch)
                s2 = np.einsum("ij,ij->j", d2, xn2, dtype=np.float64).astype(np.float32) / m
                accum(x, (dxh - s1 - xn * s2) * inv)

        return make_result(out, (x, gamma, beta), bk)

    inv = (1.0 / np.sqrt(p.running_var.astype(np.float64) + p.epsilon)).astype(np.float32)
    a = gamma.data * inv
    out = x.data * a + (beta.data - p.running_mean * a)

    def bk(g, accum):
        if gamma.requires_grad:
            xn2 = ((x.data - p.running_mean) * inv).reshape(-1, ch)
            g2 = g.reshape(-1, ch)
            accum(gamma, np.einsum("ij,ij->j", g2, xn2, dtype=np.float64).astype(np.float32))
        if beta.requires_grad:
            accum(beta, g.sum(axis=axes, dtype=np.float64).astype(np.float32))
        if x.requires_grad:
            accum(x, g * a)

    return make_result(out, (x, gamma, beta), bk)


def ch_shape(p: BatchNormParams):
    return p.gamma.data.shape


def bn_act(x: Tensor, p: BatchNormParams, kind: str, training: bool, alpha: float = 1.0) -> Tensor:
    """Fused batch_norm + activation; semantics match composing the two ops.

    This is the layer building block the models use on their hot paths; it
    exists so the big normalized feature maps are touched once per pass
    instead of several times.
    """
    x = as_tensor(x)
    if kind not in _ACT_IDS:
        raise ParamError(f"bn_act: unknown activation {kind!r}")
    act_id = _ACT_IDS[kind]
    ch = x.data.shape[-1]
    if ch != p.gamma.data.shape[0]:
        raise ShapeError(f"bn_act channel mismatch: {x.data.shape} vs {p.gamma.data.shape}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, ch))
    m = x2.shape[0]
    if m == 0:
        raise ParamError("bn_act on an empty batch")
    gamma, beta = p.gamma, p.beta

    if training:
        mu64 = x2.mean(axis=0, dtype=np.float64)
        sq64 = np.einsum("ij,ij->j", x2, x2, dtype=np.float64) / m
        var64 = np.maximum(sq64 - mu64 * mu64, 0.0)
        p.update_running(mu64, var64)
        inv = (1.0 / np.sqrt(var64 + p.epsilon)).astype(np.float32)
        muinv = (mu64 * (1.0 / np.sqrt(var64 + p.epsilon))).astype(np.float32)
        xn, y2 = _kernels.bn_act_fwd_train(x2, inv, muinv, gamma.data, beta.data, alpha, act_id)

        def bk(g, accum):
            g2 = np.ascontiguousarray(g.reshape(-1, ch))
            if m >= _SPARSE_MIN_ROWS and not g2.any():
                return
            gv = _kernels.act_grad_from_y(y2, g2, alpha, act_id)
            sgv = gv.sum(axis=0, dtype=np.float64).astype(np.float32)
            sgx = np.einsum("ij,ij->j", gv, xn, dtype=np.float64).astype(np.float32)
            if beta.requires_grad:
                accum(beta, sgv.copy())
            if gamma.requires_grad:
                accum(gamma, sgx.copy())
            if x.requires_grad:
                m1 = gamma.data * sgv / np.float32(m)
                m2 = gamma.data * sgx / np.float32(m)
                dx = _kernels.bn_dx(gv, xn, gamma.data, inv, m1, m2)
                accum(x, dx.reshape(x.data.shape))

        return make_result(y2.reshape(x.data.shape), (x, gamma, beta), bk)

    inv = (1.0 / np.sqrt(p.running_var.astype(np.float64) + p.epsilon)).astype(np.float32)
    a = gamma.data * inv
    b = beta.data - p.running_mean * a
    y2 = _kernels.affine_act_fwd(x2, a, b, alpha, act_id)

    def bk(g, accum):
        g2 = np.ascontiguousarray(g.reshape(-1, ch))
        gv = _kernels.act_grad_from_y(y2, g2, alpha, act_id)
        if beta.requires_grad:
            accum(beta, gv.sum(axis=0, dtype=np.float64).astype(np.float32))
        if gamma.requires_grad:
            xn = (x2 - p.running_mean) * inv
            accum(gamma, np.einsum("ij,ij->j", gv, xn, dtype=np.float64).astype(np.float32))
        if x.requires_grad:
            accum(x, (gv * a).reshape(x.data.shape))

    return make_result(y2.reshape(x.data.shape), (x, gamma, beta), bk)


# ---------------------------------------------------------------------------
# activations


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    neg = x.data <= 0.0
    out = np.where(neg, alpha * np.expm1(np.minimum(x.data, 0.0)), x.data).astype(np.float32)

    def bk(g, accum):
        accum(x, np.where(neg, out + np.float32(alpha), np.float32(1.0)) * g)

    return make_result(out, (x,), bk)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    neg = x.data < 0.0
    out = np.where(neg, np.float32(alpha) * x.data, x.data)

    def bk(g, accum):
        accum(x, np.where(neg, np.float32(alpha), np.float32(1.0)) * g)

    return make_result(out, (x,), bk)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _kernels.affine_act_fwd(
        np.ascontiguousarray(x.data.reshape(-1, 1)),
        np.ones(1, np.float32),
        np.zeros(1, np.float32),
        0.0,
        _kernels.ACT_SIGMOID,
    ).reshape(x.data.shape)

    def bk(g, accum):
        accum(x, g * out * (1.0 - out))

    return make_result(out, (x,), bk)


def hard_sigmoid(x: Tensor, slope: float, offset: float) -> Tensor:
    """max(0, min(1, x*slope + offset)).

    The subgradient is `slope` strictly inside the linear interval and 0 on
    the plateaus, including at the kink points themselves.
    """
    x = as_tensor(x)
    if slope <= 0:
        raise ParamError("hard_sigmoid slope must be > 0")
    z = x.data * np.float32(slope) + np.float32(offset)
    out = np.clip(z, 0.0, 1.0)
    inside = (z > 0.0) & (z < 1.0)

    def bk(g, accum):
        accum(x, g * (inside * np.float32(slope)))

    return make_result(out, (x,), bk)


def activate(x: Tensor, kind: str, **kwargs) -> Tensor:
    if kind == "elu":
        return elu(x, alpha=kwargs.get("alpha", 1.0))
    if kind == "leaky_relu":
        return leaky_relu(x, alpha=kwargs.get("alpha", 0.2))
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "hard_sigmoid":
        return hard_sigmoid(x, kwargs["slope"], kwargs.get("offset", 0.0))
    raise ParamError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# stochastic ops


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; identity when rate == 0; deterministic per seed."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ParamError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    gen = as_generator(rng)
    keep = gen.random(x.data.shape, dtype=np.float32) >= rate
    scale = np.float32(1.0 / (1.0 - rate))
    mask = keep.astype(np.float32) * scale
    out = x.data * mask

    def bk(g, accum):
        accum(x, g * mask)

    return make_result(out, (x,), bk)


def gaussian_noise(x: Tensor, sd: float, rng, training: bool = True) -> Tensor:
    """Additive N(0, sd^2) during training; identity otherwise.

    The noise is a constant for autodiff: gradients pass through unchanged.
    """
    x = as_tensor(x)
    if sd < 0:
        raise ParamError("gaussian_noise sd must be >= 0")
    if sd == 0.0 or not training:
        return x
    gen = as_generator(rng)
    noise = gen.normal(0.0, sd, size=x.data.shape).astype(np.float32)
    out = x.data + noise

    def bk(g, accum):
        accum(x, g)

    return make_result(out, (x,), bk)


# ---------------------------------------------------------------------------
# spatial layout


def _spatial_axes(ndim: int):
    if ndim == 4:
        return (1, 2)
    if ndim == 3 or ndim == 2:
        return (0, 1)
    if ndim == 1:
        return (0,)
    raise ShapeError(f"unsupported rank {ndim} for spatial op")


def mirror_pad(x: Tensor, border: int) -> Tensor:
    """Reflect-pad the spatial axes without repeating the edge row."""
    x = as_tensor(x)
    if border < 0:
        raise ParamError("border must be >= 0")
    if border == 0:
        return x
    axes = _spatial_axes(x.data.ndim)
    for a in axes:
        if x.data.shape[a] < border + 1:
            raise ShapeError(
                f"mirror_pad border {border} too large for axis {a} of shape {x.data.shape}"
            )
    pads = [(0, 0)] * x.data.ndim
    for a in axes:
        pads[a] = (border, border)
    out = np.pad(x.data, pads, mode="reflect")

    def bk(g, accum):
        for a in axes:
            n = x.data.shape[a]
            idx = np.pad(np.arange(n), border, mode="reflect")
            gm = np.moveaxis(g, a, 0)
            red = np.zeros((n,) + gm.shape[1:], dtype=np.float32)
            np.add.at(red, idx, gm)
            g = np.moveaxis(red, 0, a)
        accum(x, g)

    return make_result(out, (x,), bk)


def crop(x: Tensor, border: int) -> Tensor:
    """Remove `border` rows/columns from each spatial edge."""
    x = as_tensor(x)
    if border < 0:
        raise ParamError("border must be >= 0")
    if border == 0:
        return x
    axes = _spatial_axes(x.data.ndim)
    sl = [slice(None)] * x.data.ndim
    for a in axes:
        if x.data.shape[a] <= 2 * border:
            raise ShapeError(f"crop border {border} too large for shape {x.data.shape}")
        sl[a] = slice(border, x.data.shape[a] - border)
    sl = tuple(sl)
    out = np.ascontiguousarray(x.data[sl])

    def bk(g, accum):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        accum(x, dx)

    return make_result(out, (x,), bk)


# ---------------------------------------------------------------------------
# frozen 1-D function lookup


def piecewise_linear(x: Tensor, x0: float, step: float, table: np.ndarray) -> Tensor:
    """Evaluate a dense piecewise-linear table at x, clamping outside.

    Forward is exact linear interpolation; backward multiplies by the segment
    slope (the true derivative of the interpolated function), zero outside
    the table span.
    """
    x = as_tensor(x)
    npts = table.shape[0]
    pos = (x.data.astype(np.float64) - x0) / step
    inside = (pos > 0.0) & (pos < npts - 1)
    pos = np.clip(pos, 0.0, npts - 1 - 1e-9)
    idx = pos.astype(np.int64)
    frac = (pos - idx).astype(np.float32)
    t0 = table[idx]
    seg = table[idx + 1] - t0
    out = t0 + seg * frac

    def bk(g, accum):
        accum(x, g * (seg * inside.astype(np.float32) / np.float32(step)))

    return make_result(out, (x,), bk)


def mask_compose(masks: Tensor, textures: Tensor) -> Tensor:
    """sum_k masks[n,h,w,k] * textures[k,h,w,c] -> (n,h,w,c)."""
    masks = as_tensor(masks)
    textures = as_tensor(textures)
    if masks.data.shape[-1] != textures.data.shape[0]:
        raise ShapeError(
            f"mask_compose: {masks.data.shape} incompatible with {textures.data.shape}"
        )
    out = np.einsum("nhwk,khwc->nhwc", masks.data, textures.data).astype(np.float32)

    def bk(g, accum):
        if masks.requires_grad:
            accum(masks, np.einsum("nhwc,khwc->nhwk", g, textures.data).astype(np.float32))
        if textures.requires_grad:
            accum(textures, np.einsum("nhwc,nhwk->khwc", g, masks.data).astype(np.float32))

    return make_result(out, (masks, textures), bk)


def take_channel(x: Tensor, i: int) -> Tensor:
    """Select channel i of the trailing axis, keeping it as size 1."""
    x = as_tensor(x)
    out = x.data[..., i : i + 1]

    def bk(g, accum):
        dx = np.zeros_like(x.data)
        dx[..., i : i + 1] = g
        accum(x, dx)

    return make_result(np.ascontiguousarray(out), (x,), bk)


def tsum(x: Tensor) -> Tensor:
    """Sum all elements to a scalar (accumulated in float64)."""
    x = as_tensor(x)
    val = x.data.sum(dtype=np.float64)

    def bk(g, accum):
        accum(x, np.full_like(x.data, np.float32(g.reshape(()))))

    return make_result(np.float32(val), (x,), bk)


def tmean(x: Tensor) -> Tensor:
    """Mean of all elements as a scalar (accumulated in float64)."""
    x = as_tensor(x)
    n = x.data.size
    val = x.data.mean(dtype=np.float64)

    def bk(g, accum):
        accum(x, np.full_like(x.data, np.float32(g.reshape(()) / n)))

    return make_result(np.float32(val), (x,), bk)


# ---------------------------------------------------------------------------
# losses


def _check_same_shape(pred: Tensor, target: Tensor, op: str):
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"{op}: shape mismatch {pred.data.shape} vs {target.data.shape}")


def _check_unit_range(arr: np.ndarray, what: str):
    lo, hi = float(arr.min()), float(arr.max())
    if lo < -1e-5 or hi > 1.0 + 1e-5:
        raise ParamError(f"{what} must lie in [0, 1], observed range [{lo}, {hi}]")


def mse(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target, "mse")
    d = pred.data - target.data
    n = d.size
    val = np.einsum("i,i->", d.ravel(), d.ravel(), dtype=np.float64) / n

    def bk(g, accum):
        coeff = np.float32(2.0 / n) * float(g.reshape(()))
        if pred.requires_grad:
            accum(pred, coeff * d)
        if target.requires_grad:
            accum(target, -coeff * d)

    return make_result(np.float32(val), (pred, target), bk)


_BCE_EPS = 1e-7


def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target, "bce")
    _check_unit_range(pred.data, "bce predictions")
    _check_unit_range(target.data, "bce targets")
    pc = np.clip(pred.data.astype(np.float64), _BCE_EPS, 1.0 - _BCE_EPS)
    t = target.data.astype(np.float64)
    n = pc.size
    val = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean()

    def bk(g, accum):
        gs = float(g.reshape(()))
        if pred.requires_grad:
            inside = (pred.data > _BCE_EPS) & (pred.data < 1.0 - _BCE_EPS)
            dp = (pc - t) / (pc * (1.0 - pc) * n)
            accum(pred, (gs * dp * inside).astype(np.float32))
        if target.requires_grad:
            dt = (np.log1p(-pc) - np.log(pc)) / n
            accum(target, (gs * dt).astype(np.float32))

    return make_result(np.float32(val), (pred, target), bk)


def dice_loss(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same_shape(pred, target, "dice")
    _check_unit_range(pred.data, "dice predictions")
    _check_unit_range(target.data, "dice targets")
    p64 = pred.data.ravel()
    t64 = target.data.ravel()
    spt = np.einsum("i,i->", p64, t64, dtype=np.float64)
    sp = p64.sum(dtype=np.float64)
    st = t64.sum(dtype=np.float64)
    num = 2.0 * spt + smooth
    den = sp + st + smooth
    val = 1.0 - num / den

    def bk(g, accum):
        gs = float(g.reshape(()))
        if pred.requires_grad:
            dp = -(2.0 * target.data.astype(np.float64) * den - num) / (den * den)
            accum(pred, (gs * dp).astype(np.float32))
        if target.requires_grad:
            dt = -(2.0 * pred.data.astype(np.float64) * den - num) / (den * den)
            accum(target, (gs * dt).astype(np.float32))

    return make_result(np.float32(val), (pred, target), bk)


def loss(pred: Tensor, target, kind: str) -> Tensor:
    if kind == "mse":
        return mse(pred, target)
    if kind == "bce":
        return bce(pred, target)
    if kind == "dice":
        return dice_loss(pred, target)
    raise ParamError(f"unknown loss kind {kind!r}")
