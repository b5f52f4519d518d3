"""Adam with decoupled-from-nothing L2: the penalty gradient is added to the
raw gradient inside the step, uniformly over all parameters, and there is no
gradient clipping anywhere.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError
from .tensor import Tensor


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], lr=1e-3, beta1=0.95,
                 beta2=0.999, eps=1e-8, l2=1e-4):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.l2 = lr, beta1, beta2, eps, l2
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        if self.t >= 2 ** 62:
            raise OverflowError("step counter out of range")
        if all(p.grad is None for _, p in self.params):
            raise ValueError("no gradients; run backward() first")
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            # a parameter the loss never touched still feels the L2 penalty
            g = self.l2 * p.data if p.grad is None else p.grad + self.l2 * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise NumericalError(f"non-finite parameter '{name}' after update")

    # -- serialization ----------------------------------------------------

    def state(self) -> tuple[int, dict, dict]:
        return self.t, self.m, self.v

    def load_state(self, t: int, m: dict, v: dict) -> None:
        for name, p in self.params:
            if m[name].shape != p.data.shape or v[name].shape != p.data.shape:
                raise ValueError(f"optimizer state shape mismatch for '{name}'")
        self.t = int(t)
        self.m = {k: np.array(a, dtype=self.m[k].dtype) for k, a in m.items()}
        self.v = {k: np.array(a, dtype=self.v[k].dtype) for k, a in v.items()}
