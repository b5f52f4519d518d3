"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward() walks
the tape in reverse topological order and accumulates gradients into every
ancestor.  The op set is exactly what the segment VAE stack needs; anything
fancier belongs in the caller.

Gradients flowing into named leaves (parameters, inputs someone chose to name)
are checked for finiteness so a diverging run fails loudly with the layer name
instead of silently training on NaNs.  Set CHECK_FINITE = True to extend the
check to every op output while debugging.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError
from . import conv as convops

CHECK_FINITE = False


def _check(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name
        if CHECK_FINITE:
            _check(self.data, name or "tensor")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- graph construction helpers ------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; fills .grad on every ancestor."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i < len(node.parents):
                stack.append((node, i + 1))
                p = node.parents[i]
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, 0))
            else:
                order.append(node)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), mul(self, -1.0))

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def square(self):
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution; named leaves are checked for finiteness."""
    if t.name is not None:
        _check(g, f"gradient for '{t.name}'")
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = a.data.dtype.type(b)

        def bwd_scalar(g):
            accumulate(a, g * s)

        return Tensor(a.data * s, (a,), bwd_scalar)
    b = as_tensor(b, a.dtype)

    def bwd(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(a.data * b.data, (a, b), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        accumulate(a, g * (2.0 * a.data))

    return Tensor(a.data * a.data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        accumulate(a, g * (1.0 - out_data * out_data))

    return Tensor(out_data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        accumulate(a, g * out_data)

    return Tensor(out_data, (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    out_data = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)

    def bwd(g):
        accumulate(a, g * inside)

    return Tensor(out_data, (a,), bwd)


# -- reductions / shape ----------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def bwd(g):
        accumulate(a, np.full(a.data.shape, g / n, dtype=a.data.dtype))

    return Tensor(out_data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        accumulate(a, g.reshape(old))

    return Tensor(a.data.reshape(shape), (a,), bwd)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")

    def bwd(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return Tensor(a.data @ b.data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (B,I) @ w (I,O) + b (O,)."""
    out_data = x.data @ w.data + b.data

    def bwd(g):
        accumulate(x, g @ w.data.T)
        accumulate(w, x.data.T @ g)
        accumulate(b, g.sum(axis=0))

    return Tensor(out_data, (x, w, b), bwd)


# -- convolution -------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride, pad) -> Tensor:
    in_hw = x.data.shape[2:]
    k_hw = w.data.shape[2:]
    out_data = convops.conv2d(x.data, w.data, stride, pad)
    out_data += b.data.reshape(1, -1, 1, 1)

    def bwd(g):
        accumulate(x, convops.conv2d_input_grad(g, w.data, stride, pad, in_hw))
        accumulate(w, convops.conv2d_weight_grad(x.data, g, stride, pad, k_hw))
        accumulate(b, g.sum(axis=(0, 2, 3)))

    return Tensor(out_data, (x, w, b), bwd)


def conv2d_transpose(z: Tensor, w: Tensor, b: Tensor, stride, pad, out_hw) -> Tensor:
    """Transposed conv: forward IS conv2d_input_grad, so the pair is adjoint.

    w keeps the layout of the paired forward conv, (C_in, C_out, kT, kF) where
    C_in is z's channel count.  out_hw names the spatial shape being restored;
    it resolves the stride ambiguity explicitly.
    """
    k_hw = w.data.shape[2:]
    out_data = convops.conv2d_input_grad(z.data, w.data, stride, pad, out_hw)
    out_data += b.data.reshape(1, -1, 1, 1)

    def bwd(g):
        accumulate(z, convops.conv2d(g, w.data, stride, pad))
        accumulate(w, convops.conv2d_weight_grad(g, z.data, stride, pad, k_hw))
        accumulate(b, g.sum(axis=(0, 2, 3)))

    return Tensor(out_data, (z, w, b), bwd)


# -- classification loss ------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.data.shape[0]:
        raise ValueError("labels must be (B,) ints")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    rows = np.arange(y.shape[0])
    nll = lse[rows, 0] - logits.data[rows, y]
    out_data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(logits.data - lse)
        p[rows, y] -= 1.0
        accumulate(logits, (g / y.shape[0]) * p)

    return Tensor(out_data, (logits,), bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax for inference paths (no graph)."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)
