"""Central finite-difference oracle for the tensor engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T


def numerical_grad(fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """d fn / d input by central differences; ``fn`` maps float64 tensors to a scalar."""
    grads = []
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[T.Tensor(a, dtype=np.float64) for a in arrays]).item()
            flat[i] = orig - h
            fm = fn(*[T.Tensor(a, dtype=np.float64) for a in arrays]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    ts = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True, dtype=np.float64) for a in inputs]
    T.backward(fn(*ts))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradcheck(fn, inputs, h: float = 1e-3, floor: float = 1e-3) -> float:
    """Largest relative disagreement between analytic and numerical gradients."""
    num = numerical_grad(fn, inputs, h)
    ana = analytic_grad(fn, inputs)
    return max(max_relative_error(a, n, floor) for a, n in zip(ana, num))
