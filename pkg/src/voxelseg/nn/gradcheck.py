"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from voxelseg.nn.tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("gradient check needs a scalar-valued graph")
    tape.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def numeric_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float,
                  coords: Sequence[np.ndarray | None] | None = None) -> list[np.ndarray]:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` per coordinate.

    ``coords`` optionally restricts each input to a subset of flat indices;
    unchecked coordinates come back as NaN.
    """
    grads = []
    for i, t in enumerate(inputs):
        g = np.full(t.data.size, np.nan)
        if not t.requires_grad:
            grads.append(g.reshape(t.shape))
            continue
        flat = t.data.reshape(-1)
        todo = range(flat.size) if coords is None or coords[i] is None else coords[i]
        for j in todo:
            keep = flat[j]
            flat[j] = keep + h
            fp = float(fn(*inputs).data)
            flat[j] = keep - h
            fm = float(fn(*inputs).data)
            flat[j] = keep
            g[j] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.shape))
    return grads


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-6,
               numeric_dtype=None, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.  With
    ``numeric_dtype`` set, the finite differences are evaluated on copies of
    the inputs cast to that dtype (e.g. check a float32 graph against a
    float64 oracle).  ``max_coords`` samples that many coordinates per input.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    analytic = analytic_grads(fn, inputs)
    if numeric_dtype is not None:
        probe = [Tensor(t.data.astype(numeric_dtype), requires_grad=t.requires_grad) for t in inputs]
    else:
        probe = list(inputs)
    coords = None
    if max_coords is not None:
        rng = np.random.default_rng(seed)
        coords = [None if t.data.size <= max_coords
                  else np.sort(rng.choice(t.data.size, max_coords, replace=False))
                  for t in probe]
    numeric = numeric_grads(fn, probe, h, coords)
    worst = 0.0
    for t, a, n in zip(inputs, analytic, numeric):
        if not t.requires_grad:
            continue
        mask = ~np.isnan(n)
        if mask.any():
            worst = max(worst, float(relative_error(a[mask], n[mask]).max()))
    return worst
