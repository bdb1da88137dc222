from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).data.item()
        flat[i] = orig - h
        fm = f(x).data.item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the backward gradient and central differences.

    ``x`` must be a float64 leaf; its ``requires_grad`` flag is set for the
    analytic pass and its grad buffer reset.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs float64 input")
    x.requires_grad_(True)
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = x.grad.copy()
    x.requires_grad_(False)
    try:
        numeric = numerical_grad(f, x, h)
    finally:
        x.requires_grad_(True)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
