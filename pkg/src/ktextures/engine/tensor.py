"""Reverse-mode autodiff over float32 numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer. Operations in
:mod:`ktextures.engine.functional` build a DAG of parent links and backward
closures; ``backward(loss)`` walks it in reverse topological order. Tensors
that do not require gradients carry no graph, so inference runs as plain
eager numpy.
"""

from __future__ import annotations

import numpy as np


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeError(EngineError):
    """Operand shapes are incompatible with the operation."""


class ParamError(EngineError):
    """An argument value violates an operation's precondition."""


class GraphError(EngineError):
    """The autodiff graph was used incorrectly (e.g. backward on non-scalar)."""


_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (slow, for debugging)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        # Parameters start with an explicit zero gradient so that parameters
        # never touched by backward() report exactly zero.
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def make_result(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result, attaching graph edges only when a parent needs them.

    ``backward_fn(g, accum)`` receives the upstream gradient and a sink
    ``accum(parent, grad_array)``; it must route a contribution to every
    parent with ``requires_grad``.
    """
    if _debug_checks and not np.all(np.isfinite(data)):
        raise EngineError("non-finite values produced by an engine op")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None  # leaf params own a buffer; graph nodes use scratch space
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into .grad of every reachable parameter.

    Intermediate gradients live in per-call scratch storage, so repeated
    calls without zeroing add up on the parameters, and the graph can be
    replayed (nothing is freed here; the graph dies with its references).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def accum(t: Tensor, g: np.ndarray):
        if t._backward is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        else:
            key = id(t)
            prev = scratch.get(key)
            # New array on second contribution: `g` may be aliased by a
            # sibling edge, never add into it in place.
            scratch[key] = g if prev is None else prev + g

    for node in reversed(order):
        g = scratch.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # Only the seed can be a leaf here; parents go through accum.
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        else:
            node._backward(g, accum)
