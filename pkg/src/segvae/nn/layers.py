"""Trainable layers: linear, conv, transposed conv, batch norm.

Layers own named parameter Tensors (fresh leaves reused across calls) plus,
for batch norm, running-stat arrays that are explicit model state.  Everything
is dtype-parametric: f32 for training, f64 for gradient checks.
"""

from __future__ import annotations

import numpy as np

from ..rng import Rng
from . import tensor as T
from .conv import conv_out_len

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def glorot_uniform(rng: Rng, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    u = rng.uniform(shape)
    return ((u * 2.0 - 1.0) * lim).astype(dtype)


def parameter(data: np.ndarray, name: str) -> T.Tensor:
    return T.Tensor(data, name=name)


class Layer:
    def params(self) -> list[tuple[str, T.Tensor]]:
        return []

    def stats(self) -> list[tuple[str, np.ndarray]]:
        return []


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: Rng, dtype, name: str):
        self.name = name
        self.w = parameter(glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype), f"{name}.w")
        self.b = parameter(np.zeros(n_out, dtype=dtype), f"{name}.b")

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.linear(x, self.w, self.b)

    def params(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]


class Conv2d(Layer):
    """Strided cross-correlation, kernel (out_ch, in_ch, kT, kF)."""

    def __init__(self, in_ch, out_ch, kernel, stride, pad, rng: Rng, dtype, name: str):
        kt, kf = kernel
        self.stride, self.pad, self.name = tuple(stride), tuple(pad), name
        fan_in = in_ch * kt * kf
        fan_out = out_ch * kt * kf
        self.w = parameter(
            glorot_uniform(rng, (out_ch, in_ch, kt, kf), fan_in, fan_out, dtype), f"{name}.w"
        )
        self.b = parameter(np.zeros(out_ch, dtype=dtype), f"{name}.b")

    def out_hw(self, in_hw):
        (kt, kf), (st, sf), (pt, pf) = self.w.shape[2:], self.stride, self.pad
        return (conv_out_len(in_hw[0], kt, st, pt), conv_out_len(in_hw[1], kf, sf, pf))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.w, self.b, self.stride, self.pad)

    def params(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]


class TransposedConv2d(Layer):
    """Adjoint of a Conv2d with the same geometry; restores out_hw given at call."""

    def __init__(self, in_ch, out_ch, kernel, stride, pad, rng: Rng, dtype, name: str):
        kt, kf = kernel
        self.stride, self.pad, self.name = tuple(stride), tuple(pad), name
        # kernel stored in the paired conv's layout: (in_ch, out_ch, kT, kF)
        fan_in = in_ch * kt * kf
        fan_out = out_ch * kt * kf
        self.w = parameter(
            glorot_uniform(rng, (in_ch, out_ch, kt, kf), fan_in, fan_out, dtype), f"{name}.w"
        )
        self.b = parameter(np.zeros(out_ch, dtype=dtype), f"{name}.b")

    def __call__(self, z: T.Tensor, out_hw) -> T.Tensor:
        return T.conv2d_transpose(z, self.w, self.b, self.stride, self.pad, out_hw)

    def params(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]


class BatchNorm(Layer):
    """Batch norm with biased batch variance and explicit running-stat state.

    Train mode normalizes by batch statistics and then performs the state
    transition running = momentum * running + (1 - momentum) * batch.
    Infer mode reads the running stats and touches nothing.
    """

    def __init__(self, n_ch: int, dtype, name: str, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones(n_ch, dtype=dtype), f"{name}.gamma")
        self.beta = parameter(np.zeros(n_ch, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(n_ch, dtype=dtype)
        self.running_var = np.ones(n_ch, dtype=dtype)

    def _axes_and_shape(self, x: T.Tensor):
        if x.data.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        if x.data.ndim == 2:
            return (0,), (1, -1)
        raise ValueError("batch norm expects 2-d or 4-d input")

    def __call__(self, x: T.Tensor, train: bool) -> T.Tensor:
        axes, bshape = self._axes_and_shape(x)
        gamma, beta = self.gamma, self.beta
        if train:
            if x.data.shape[0] < 2:
                raise ValueError(f"{self.name}: train-mode batch norm needs batch >= 2")
            mu = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)  # biased, matches the backward below
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1.0 - m) * mu).astype(x.data.dtype)
            self.running_var = (m * self.running_var + (1.0 - m) * var).astype(x.data.dtype)
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        out_data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

        def bwd(g):
            T.accumulate(beta, g.sum(axis=axes))
            T.accumulate(gamma, (g * xhat).sum(axis=axes))
            gi = gamma.data.reshape(bshape) * inv.reshape(bshape)
            if train:
                # closed-form backward for biased-variance batch norm
                gm = g.mean(axis=axes).reshape(bshape)
                gxm = (g * xhat).mean(axis=axes).reshape(bshape)
                T.accumulate(x, gi * (g - gm - xhat * gxm))
            else:
                T.accumulate(x, gi * g)

        return T.Tensor(out_data, (x, gamma, beta), bwd)

    def params(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]

    def stats(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def set_stats(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = mean.copy()
        self.running_var = var.copy()
