"""Central finite-difference checking of analytic gradients.

The loss callable must be a deterministic pure function of the parameter data
(freeze batches and noise draws before calling).  Relative error uses a 1e-3
scale floor: losses here are O(100), so the floor is one part in 1e5 of the
loss scale and keeps h^2 truncation noise from dominating near-zero gradients.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

REL_FLOOR = 1e-3


def finite_difference_check(loss_fn, params: list[tuple[str, Tensor]],
                            h: float = 1e-5) -> dict:
    """Compare backward() gradients against central differences.

    Returns {"max_rel_err": float, "worst": (name, index), "per_param": {...}}.
    Parameters are perturbed in place and restored exactly.
    """
    for name, p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"gradient check requires float64 params ('{name}')")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params}

    max_rel = 0.0
    worst = (None, None)
    per_param = {}
    for name, p in params:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = float(loss_fn().data)
            flat[i] = keep - h
            f_minus = float(loss_fn().data)
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * h)
            a = float(a_flat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), REL_FLOOR)
            if rel > worst_here:
                worst_here = rel
            if rel > max_rel:
                max_rel = rel
                worst = (name, i)
        per_param[name] = worst_here
    return {"max_rel_err": max_rel, "worst": worst, "per_param": per_param}
