"""Differentiable operations on channels-last 5-D tensors.

Every op computes its forward pass in numpy, then registers a closure that
maps the output gradient to input gradients.  Convolutions go through
``im2col3d``/``col2im3d`` from :mod:`voxelseg.nn.kernels` and a single GEMM,
so the only data-dependent summation order lives in BLAS and in the
fixed-order kernels.
"""
from __future__ import annotations

import numpy as np

from voxelseg.errors import IndivisibleShape, ShapeMismatch
from voxelseg.nn.kernels import col2im3d, im2col3d
from voxelseg.nn.tensor import Tensor, as_tensor, record

_SPATIAL = (0, 1, 2, 3)


def _check5(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeMismatch(f"{what} expects (batch, x, y, z, channels), got shape {x.shape}")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero 'same' padding (``k // 2`` per side).

    ``w`` has shape ``(k, k, k, c_in, c_out)`` with ``k`` odd.  At stride 1
    the spatial shape is preserved.
    """
    _check5(x, "conv3d")
    if w.ndim != 5 or w.shape[0] != w.shape[1] or w.shape[1] != w.shape[2]:
        raise ShapeMismatch(f"conv3d weight must be (k, k, k, c_in, c_out), got {w.shape}")
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeMismatch(f"same padding needs an odd kernel, got k={k}")
    if w.shape[3] != x.shape[4]:
        raise ShapeMismatch(f"conv3d: input has {x.shape[4]} channels, weight expects {w.shape[3]}")
    c_out = w.shape[4]
    if b is not None and b.shape != (c_out,):
        raise ShapeMismatch(f"conv3d bias must have shape ({c_out},), got {b.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    bsz = x.shape[0]
    p = k // 2
    out_sp = tuple((n + 2 * p - k) // stride + 1 for n in x.shape[1:4])
    cols = im2col3d(x.data, k, stride)
    wm = w.data.reshape(-1, c_out)
    out = cols @ wm
    if b is not None:
        out += b.data
    out = out.reshape((bsz,) + out_sp + (c_out,))

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        dx = col2im3d(g2 @ wm.T, k, stride, x.shape) if x.requires_grad else None
        dw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return record(out, inputs, backward)


def transposed_conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2x2x2 transposed convolution at stride 2; doubles each spatial axis.

    ``w`` has shape ``(2, 2, 2, c_out, c_in)``.  Kernel and stride coincide,
    so every output voxel receives exactly one input voxel's contribution.
    """
    _check5(x, "transposed_conv3d")
    if w.ndim != 5 or w.shape[:3] != (2, 2, 2):
        raise ShapeMismatch(f"transposed_conv3d weight must be (2, 2, 2, c_out, c_in), got {w.shape}")
    if w.shape[4] != x.shape[4]:
        raise ShapeMismatch(f"transposed_conv3d: input has {x.shape[4]} channels, weight expects {w.shape[4]}")
    bsz, X, Y, Z, c_in = x.shape
    c_out = w.shape[3]
    x2 = x.data.reshape(-1, c_in)
    w2 = w.data.reshape(8 * c_out, c_in)
    y = (x2 @ w2.T).reshape(bsz, X, Y, Z, 2, 2, 2, c_out)
    y = y.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(bsz, 2 * X, 2 * Y, 2 * Z, c_out)
    if b is not None:
        y = y + b.data

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gb = g.reshape(bsz, X, 2, Y, 2, Z, 2, c_out).transpose(0, 1, 3, 5, 2, 4, 6, 7)
        gb = np.ascontiguousarray(gb).reshape(-1, 8 * c_out)
        dx = (gb @ w2).reshape(x.shape) if x.requires_grad else None
        dw = (gb.T @ x2).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g.reshape(-1, c_out).sum(axis=0)

    return record(np.ascontiguousarray(y), inputs, backward)


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling at stride 2.  Ties route the gradient to the first
    element of the window in (dx, dy, dz) order."""
    _check5(x, "maxpool3d")
    bsz, X, Y, Z, C = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise IndivisibleShape(f"maxpool3d needs even spatial dims, got {(X, Y, Z)}")
    hx, hy, hz = X // 2, Y // 2, Z // 2
    win = x.data.reshape(bsz, hx, 2, hy, 2, hz, 2, C).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    win = win.reshape(bsz, hx, hy, hz, C, 8)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(bsz, hx, hy, hz, C, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
        return (gw.reshape(x.shape),)

    return record(np.ascontiguousarray(out), (x,), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (batch, x, y, z).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place by an exponential moving average
    (the variance estimate is the unbiased one).  In inference mode the
    running statistics are used.
    """
    _check5(x, "batchnorm")
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"batchnorm affine params must have shape ({C},)")
    g_ = gamma.data
    if training:
        n = x.data.size // C
        mean = x.data.mean(axis=_SPATIAL)
        centered = x.data - mean
        var = (centered * centered).mean(axis=_SPATIAL)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            dxhat = g * g_
            dx = None
            if x.requires_grad:
                s1 = dxhat.sum(axis=_SPATIAL)
                s2 = (dxhat * xhat).sum(axis=_SPATIAL)
                dx = (inv_std / n) * (n * dxhat - s1 - xhat * s2)
            return dx, (g * xhat).sum(axis=_SPATIAL), g.sum(axis=_SPATIAL)
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype)) * inv_std

        def backward(g):
            dx = g * (g_ * inv_std) if x.requires_grad else None
            return dx, (g * xhat).sum(axis=_SPATIAL), g.sum(axis=_SPATIAL)

    out = xhat * g_ + beta.data
    return record(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                  lambda g: (g * mask,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"concat_channels: {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return record(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]))


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record(p, (x,), backward)


# --- small scalar/elementwise helpers -------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` for a constant ``weights`` array (projection to a scalar)."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeMismatch(f"weighted_sum: {x.shape} vs {w.shape}")
    return record(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,))
