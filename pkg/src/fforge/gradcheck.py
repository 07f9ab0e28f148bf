"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``target.data``."""
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
                    floor: float = 1e-6) -> float:
    """Return the max relative error between backprop and finite differences.

    ``fn`` must rebuild the graph from ``inputs`` on each call and return a
    scalar.  Inputs must be float64 leaves with ``requires_grad=True``.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t, h)
        worst = max(worst, float(relative_error(analytic, numeric, floor).max(initial=0.0)))
    return worst
