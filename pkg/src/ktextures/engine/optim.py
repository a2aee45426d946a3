"""SGD and Adam with optional global gradient-norm scaling."""

from __future__ import annotations

import numpy as np

from .tensor import EngineError, ParamError, Tensor


class OptimError(EngineError):
    """Raised when an update cannot proceed (e.g. non-finite gradients)."""


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.ravel()
            total += float(np.dot(g, g))
    return float(np.sqrt(total))


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients by max_norm/||g|| when the global norm exceeds it."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _check_finite(params):
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise OptimError(f"non-finite gradient on parameter of shape {p.data.shape}")


class SGD:
    def __init__(self, lr: float, clip_norm: float | None = None):
        if lr <= 0:
            raise ParamError("learning rate must be > 0")
        if clip_norm is not None and clip_norm <= 0:
            raise ParamError("clip_norm must be > 0")
        self.lr = float(lr)
        self.clip_norm = clip_norm
        self.timestep = 0

    def step(self, params) -> None:
        params = [p for p in params if p.requires_grad]
        _check_finite(params)
        if self.clip_norm is not None:
            clip_gradients(params, self.clip_norm)
        lr = np.float32(self.lr)
        for p in params:
            if p.grad is not None:
                p.data -= lr * p.grad
        self.timestep += 1


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-7."""

    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-7,
        clip_norm: float | None = None,
    ):
        if lr <= 0:
            raise ParamError("learning rate must be > 0")
        if clip_norm is not None and clip_norm <= 0:
            raise ParamError("clip_norm must be > 0")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.clip_norm = clip_norm
        self.timestep = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, params) -> None:
        params = [p for p in params if p.requires_grad]
        _check_finite(params)
        if self.clip_norm is not None:
            clip_gradients(params, self.clip_norm)
        self.timestep += 1
        t = self.timestep
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p in params:
            g = p.grad
            if g is None:
                continue
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                self._m[key] = m
                self._v[key] = v
            else:
                v = self._v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data -= np.float32(self.lr) * (mhat / (np.sqrt(vhat) + self.eps))


def optimizer_step(params, optimizer) -> None:
    """Functional alias: apply one update using gradients stored on params."""
    optimizer.step(params)


def zero_grads(params) -> None:
    for p in params:
        if isinstance(p, Tensor):
            p.zero_grad()
