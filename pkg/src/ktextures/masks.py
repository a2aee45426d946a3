"""Binary mask cascade: k hard membership maps from one continuous map.

A frozen step model for k classes (rise at (k-1)/k) is applied to shifted
copies of the source map, giving nested indicator maps step_j ~ [x > j/k].
Differencing them yields masks that partition [0, 1] into k equal bins:

    mask_0     = 1 - step_1
    mask_i     = step_i - step_{i+1}
    mask_{k-1} = step_{k-1}

The masks sum to one identically (telescoping), and every shifted input is
clamped into the step model's certified band around its threshold, so only
the certified rise region of the trained network is ever evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import ParamError, Tensor


@dataclass
class MaskStack:
    """Per-pixel class membership maps, (N, H, W, k), summing to one."""

    k: int
    masks: object  # Tensor in graph mode, ndarray otherwise
    source: object

    def data(self) -> np.ndarray:
        return self.masks.data if isinstance(self.masks, Tensor) else self.masks


@dataclass
class ClassMap:
    """Hard per-pixel cluster indices in [0, k)."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.size and int(self.labels.max()) >= self.k:
            raise ParamError(f"label {int(self.labels.max())} out of range for k={self.k}")


def class_boundaries(k: int) -> np.ndarray:
    """Bin edges [1/k, ..., (k-1)/k] of the equal-width partition."""
    if k < 2:
        raise ParamError(f"k must be >= 2, got {k}")
    return (np.arange(1, k) / k).astype(np.float64)


def _shifts(sigma, k: int) -> np.ndarray:
    # step_j threshold at j/k: sigma rises at kth, so shift by kth - j/k.
    kth = sigma.spec.k_threshold
    return np.array([kth - j / k for j in range(1, k)], dtype=np.float64)


def binarize(source, sigma, k: int) -> MaskStack:
    """Split a [0,1] map into k masks using a frozen step model.

    Accepts a Tensor (gradients flow through the steps' linear strips) or a
    plain ndarray. `sigma` must be frozen and built for the same k.
    """
    if getattr(sigma, "k", None) != k:
        raise ParamError(f"step model is for k={getattr(sigma, 'k', None)}, requested k={k}")
    if not getattr(sigma, "frozen", False):
        raise ParamError("binarize requires a frozen step model")
    shifts = _shifts(sigma, k)

    if isinstance(source, Tensor):
        steps = [sigma.step_tensor(E.add(source, Tensor(np.float32(s)))) for s in shifts]
        masks = []
        one = Tensor(np.float32(1.0))
        masks.append(E.sub(one, steps[0]))
        for i in range(1, k - 1):
            masks.append(E.sub(steps[i - 1], steps[i]))
        masks.append(steps[-1])
        stacked = E.stack(masks, axis=-1)
        # channel axis added after the trailing singleton: (N,H,W,1,k) -> (N,H,W,k)
        if stacked.data.shape[-2] == 1:
            stacked = _squeeze_channel(stacked)
        return MaskStack(k=k, masks=stacked, source=source)

    src = np.asarray(source, dtype=np.float32)
    steps = [sigma.step_array(src.astype(np.float64) + s) for s in shifts]
    out_shape = src.shape[:-1] + (k,) if src.shape[-1:] == (1,) else src.shape + (k,)
    masks = np.empty(out_shape, dtype=np.float32)
    first = steps[0].reshape(masks.shape[:-1])
    masks[..., 0] = 1.0 - first
    for i in range(1, k - 1):
        masks[..., i] = (steps[i - 1] - steps[i]).reshape(masks.shape[:-1])
    masks[..., k - 1] = steps[-1].reshape(masks.shape[:-1])
    return MaskStack(k=k, masks=masks, source=src)


def _squeeze_channel(stacked: Tensor) -> Tensor:
    data = stacked.data.reshape(stacked.data.shape[:-2] + (stacked.data.shape[-1],))

    def bk(g, accum):
        accum(stacked, g.reshape(stacked.data.shape))

    from .engine.tensor import make_result

    return make_result(data, (stacked,), bk)


def argmax_labels(masks: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the trailing class axis (ties to lowest index)."""
    return np.argmax(masks, axis=-1).astype(np.int32)


def argmax_class(stack: MaskStack) -> ClassMap:
    """Collapse a single-image MaskStack to hard labels."""
    data = stack.data()
    labels = argmax_labels(data)
    if labels.ndim == 3:
        if labels.shape[0] != 1:
            raise ParamError("argmax_class expects a single raster; use argmax_labels for batches")
        labels = labels[0]
    return ClassMap(labels=labels, k=stack.k)


@dataclass
class BinarityCensus:
    n_zero: int
    n_one: int
    n_nonbinary: int
    n_total: int
    pct_nonbinary: float


def binarity_census(stack, eps: float = 1e-6) -> BinarityCensus:
    """Count exact-0, exact-1 and in-between mask values (Table-2 style)."""
    data = stack.data() if isinstance(stack, MaskStack) else np.asarray(stack)
    n_total = int(data.size)
    n_zero = int(np.count_nonzero(np.abs(data) <= eps))
    n_one = int(np.count_nonzero(np.abs(data - 1.0) <= eps))
    n_nonbinary = n_total - n_zero - n_one
    pct = 100.0 * n_nonbinary / n_total if n_total else 0.0
    return BinarityCensus(n_zero, n_one, n_nonbinary, n_total, pct)
