"""Strided 2-d cross-correlation and its two gradient kernels.

These are the only compute-heavy primitives in the package.  The forward pass
extracts patches with a zero-copy strided view and contracts them against the
kernel with tensordot.  The input gradient is computed by the classic
dilate / pad / flipped-kernel construction and is reused verbatim as the
forward pass of the transposed convolution, which makes conv and transposed
conv exact adjoints of each other by construction rather than by tuning.

Layouts: activations (B, C, T, F), kernels (O, C, kT, kF).
"""

from __future__ import annotations

import numpy as np


def conv_out_len(n: int, k: int, stride: int, pad: int) -> int:
    if n + 2 * pad < k:
        raise ValueError(f"kernel {k} exceeds padded input {n + 2 * pad}")
    return (n + 2 * pad - k) // stride + 1


def _patches(xp: np.ndarray, kt: int, kf: int, st: int, sf: int) -> np.ndarray:
    """(B,C,Tp,Fp) -> strided view (B,C,oT,oF,kT,kF); no copy."""
    b, c, tp, fp = xp.shape
    ot = (tp - kt) // st + 1
    of = (fp - kf) // sf + 1
    sb, sc, stt, sff = xp.strides
    shape = (b, c, ot, of, kt, kf)
    strides = (sb, sc, stt * st, sff * sf, stt, sff)
    return np.lib.stride_tricks.as_strided(xp, shape, strides)


def conv2d(x: np.ndarray, w: np.ndarray, stride=(1, 1), pad=(0, 0)) -> np.ndarray:
    """Cross-correlate x (B,C,T,F) with w (O,C,kT,kF) -> (B,O,oT,oF)."""
    st, sf = stride
    pt, pf = pad
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pf, pf))) if (pt or pf) else x
    p = _patches(xp, w.shape[2], w.shape[3], st, sf)
    y = np.tensordot(p, w, axes=([1, 4, 5], [1, 2, 3]))  # (B,oT,oF,O)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_input_grad(gy: np.ndarray, w: np.ndarray, stride, pad, in_hw) -> np.ndarray:
    """Adjoint of conv2d in its input: (B,O,oT,oF) -> (B,C,T,F).

    Zero-stuff gy by the stride, pad with k-1 plus the residual
    r = (n + 2p - k) mod s that the forward pass never covered, then run a
    stride-1 cross-correlation with the spatially flipped kernel and crop the
    padding frame back off.
    """
    st, sf = stride
    pt, pf = pad
    t_in, f_in = in_hw
    b, o, ot, of = gy.shape
    _, c, kt, kf = w.shape
    tp, fp = t_in + 2 * pt, f_in + 2 * pf
    rt = tp - kt - (ot - 1) * st
    rf = fp - kf - (of - 1) * sf
    if rt < 0 or rf < 0 or rt >= st or rf >= sf:
        raise ValueError("gradient shape inconsistent with conv geometry")
    g = np.zeros((b, o, (ot - 1) * st + 1, (of - 1) * sf + 1), dtype=gy.dtype)
    g[:, :, ::st, ::sf] = gy
    g = np.pad(g, ((0, 0), (0, 0), (kt - 1, kt - 1 + rt), (kf - 1, kf - 1 + rf)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))  # (C,O,kT,kF)
    gx = conv2d(g, wf, (1, 1), (0, 0))  # (B,C,Tp,Fp)
    if pt or pf:
        gx = np.ascontiguousarray(gx[:, :, pt:pt + t_in, pf:pf + f_in])
    return gx


def conv2d_weight_grad(x: np.ndarray, gy: np.ndarray, stride, pad, kernel_hw) -> np.ndarray:
    """Adjoint of conv2d in its kernel: -> (O,C,kT,kF)."""
    st, sf = stride
    pt, pf = pad
    kt, kf = kernel_hw
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pf, pf))) if (pt or pf) else x
    p = _patches(xp, kt, kf, st, sf)
    # contract over batch and output positions, keeping (O, C, kT, kF)
    gw = np.tensordot(gy, p, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(gw)
