"""Segmentation losses: multi-class Tversky, categorical cross-entropy, their sum.

All three take softmax probabilities ``(b, x, y, z, C)`` as a
:class:`~voxelseg.nn.Tensor` and a constant one-hot array of the same shape,
and return a 0-d tensor recorded on the active tape.  Reductions run in
float64; gradients are cast back to the probability dtype.
"""
from __future__ import annotations

import numpy as np

from voxelseg.errors import ShapeMismatch
from voxelseg.nn import ops
from voxelseg.nn.tensor import Tensor, record


def _check(probs: Tensor, onehot: np.ndarray) -> None:
    if probs.shape != np.shape(onehot):
        raise ShapeMismatch(f"probabilities {probs.shape} vs one-hot {np.shape(onehot)}")


def tversky_loss(probs: Tensor, onehot, alpha: float = 0.5, beta: float = 0.5,
                 smooth: float = 1e-5) -> Tensor:
    """``C - sum_c (TP_c + s) / (TP_c + alpha*FN_c + beta*FP_c + s)``.

    Soft counts are pooled over every voxel of the batch.
    """
    _check(probs, onehot)
    p = probs.data.astype(np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    axes = tuple(range(p.ndim - 1))
    tp = (p * y).sum(axis=axes)
    fn = ((1.0 - p) * y).sum(axis=axes)
    fp = (p * (1.0 - y)).sum(axis=axes)
    num = tp + smooth
    den = tp + alpha * fn + beta * fp + smooth
    loss = p.shape[-1] - (num / den).sum()

    def backward(g):
        # d den / d p = y - alpha*y + beta*(1 - y)
        dden = y * (1.0 - alpha - beta) + beta
        dp = -(y * den - num * dden) / (den * den)
        return (float(g) * dp,)

    return record(np.asarray(loss, dtype=probs.dtype), (probs,), backward)


def soft_dice_loss(probs: np.ndarray, onehot: np.ndarray, smooth: float = 0.0) -> float:
    """Multi-class soft Dice loss ``C - sum_c (2TP + s) / (sum p + sum y + s)``.

    Forward only; kept as an independent formulation to cross-check
    :func:`tversky_loss` at alpha = beta = 0.5 (with ``s = 2 * smooth``).
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    axes = tuple(range(p.ndim - 1))
    inter = (p * y).sum(axis=axes)
    return float(p.shape[-1] - ((2 * inter + smooth) / (p.sum(axis=axes) + y.sum(axis=axes) + smooth)).sum())


def cce_loss(probs: Tensor, onehot, floor: float = 1e-7) -> Tensor:
    """Mean over voxels of ``-sum_c y * log(clip(p, floor, 1 - floor))``."""
    _check(probs, onehot)
    p = probs.data.astype(np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    n_vox = p.size // p.shape[-1]
    pc = np.clip(p, floor, 1.0 - floor)
    loss = -(y * np.log(pc)).sum() / n_vox

    def backward(g):
        inside = (p > floor) & (p < 1.0 - floor)
        return (float(g) * np.where(inside, -y / pc, 0.0) / n_vox,)

    return record(np.asarray(loss, dtype=probs.dtype), (probs,), backward)


def total_loss(probs: Tensor, onehot, alpha: float = 0.5, beta: float = 0.5,
               smooth: float = 1e-5, floor: float = 1e-7) -> Tensor:
    """Tversky loss plus categorical cross-entropy."""
    return ops.add(tversky_loss(probs, onehot, alpha, beta, smooth),
                   cce_loss(probs, onehot, floor))
