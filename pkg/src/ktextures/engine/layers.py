"""Parameter containers and weight initialization."""

from __future__ import annotations

import numpy as np

from .tensor import ParamError, Tensor


def glorot_uniform(shape, rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class ConvParams:
    """Kernel (kh, kw, in_ch, out_ch) with kh, kw in {1, 3}, plus bias."""

    def __init__(self, kernel, bias):
        kernel = np.asarray(kernel, dtype=np.float32)
        bias = np.asarray(bias, dtype=np.float32)
        if kernel.ndim != 4:
            raise ParamError(f"conv kernel must be 4-d, got shape {kernel.shape}")
        kh, kw, ic, oc = kernel.shape
        if kh not in (1, 3) or kw not in (1, 3):
            raise ParamError(f"conv kernel extents must be 1 or 3, got {kh}x{kw}")
        if bias.shape != (oc,):
            raise ParamError(f"conv bias shape {bias.shape} does not match out_ch {oc}")
        if not (np.all(np.isfinite(kernel)) and np.all(np.isfinite(bias))):
            raise ParamError("conv parameters must be finite")
        self.kernel = Tensor(kernel, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def create(cls, kh: int, kw: int, in_ch: int, out_ch: int, rng: np.random.Generator):
        """Glorot-uniform kernel, zero bias."""
        fan_in = kh * kw * in_ch
        fan_out = kh * kw * out_ch
        kernel = glorot_uniform((kh, kw, in_ch, out_ch), rng, fan_in, fan_out)
        return cls(kernel, np.zeros(out_ch, dtype=np.float32))

    def tensors(self):
        return [self.kernel, self.bias]


class BatchNormParams:
    """Learnable gamma/beta plus running statistics (not differentiated)."""

    def __init__(self, channels: int, epsilon: float = 1e-3, momentum: float = 0.99):
        if epsilon <= 0:
            raise ParamError("batch norm epsilon must be > 0")
        if not 0.0 < momentum < 1.0:
            raise ParamError("batch norm momentum must be in (0, 1)")
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)

    def update_running(self, batch_mean, batch_var) -> None:
        m = self.momentum
        self.running_mean = (m * self.running_mean + (1.0 - m) * batch_mean).astype(np.float32)
        self.running_var = (m * self.running_var + (1.0 - m) * batch_var).astype(np.float32)
        np.maximum(self.running_var, 0.0, out=self.running_var)

    def tensors(self):
        return [self.gamma, self.beta]
