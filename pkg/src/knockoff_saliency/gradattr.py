"""Gradient baselines: Integrated Gradients and Gradient x Input.

Both attribute the pre-softmax logit of the target class and are scaled to
[-1, 1] by the largest absolute attribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

IG = "ig"
IXG = "ixg"


@dataclass
class GradMap:
    values: np.ndarray
    method: str
    raw: np.ndarray
    target: int
    sample_id: int = 0


def normalize(raw: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(raw))) if raw.size else 0.0
    if peak == 0.0:
        return np.zeros_like(raw, dtype=np.float32)
    return (raw / peak).astype(np.float32)


def class_score_and_grad(classifier, images: np.ndarray, c: int, batch: int = 100):
    """Logit of class ``c`` for each image and its gradient w.r.t. the pixels."""
    images = np.asarray(images, dtype=np.float32)
    ci = classifier.class_index(c)
    scores, grads = [], []
    for i in range(0, len(images), batch):
        xb = Tensor(images[i:i + batch], requires_grad=True)
        z = classifier.logits(xb)
        onehot = np.zeros((1, z.shape[1]), dtype=z.data.dtype)
        onehot[0, ci] = 1
        sel = (z * Tensor(onehot)).sum(axis=1)
        T.backward(sel.sum())
        scores.append(sel.data.copy())
        grads.append(xb.grad if xb.grad is not None else np.zeros_like(xb.data))
    return np.concatenate(scores), np.concatenate(grads)


def gradient_x_input(classifier, x: np.ndarray, c: int, sample_id: int = 0) -> GradMap:
    x = np.asarray(x, dtype=np.float32)
    _, g = class_score_and_grad(classifier, x[None], c)
    raw = (g[0] * x).astype(np.float64)
    return GradMap(normalize(raw), IXG, raw, int(c), sample_id)


def integrated_gradients(classifier, x: np.ndarray, c: int, baseline=None, steps: int = 50,
                         sample_id: int = 0) -> GradMap:
    """Right Riemann sum of the gradient along the straight path from ``baseline`` to ``x``."""
    if steps < 1:
        raise ValueError("integrated_gradients needs steps >= 1")
    x = np.asarray(x, dtype=np.float32)
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float32)
    alphas = np.arange(1, steps + 1, dtype=np.float32) / steps
    path = base[None] + alphas[:, None, None] * (x - base)[None]
    _, g = class_score_and_grad(classifier, path, c)
    raw = (x - base).astype(np.float64) * g.astype(np.float64).mean(axis=0)
    return GradMap(normalize(raw), IG, raw, int(c), sample_id)


def completeness_error(classifier, x: np.ndarray, c: int, gmap: GradMap, baseline=None) -> float:
    """Relative gap between the summed attributions and the logit difference."""
    x = np.asarray(x, dtype=np.float32)
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float32)
    s, _ = class_score_and_grad(classifier, np.stack([x, base]), c)
    delta = float(s[0]) - float(s[1])
    return abs(float(gmap.raw.sum()) - delta) / abs(delta)
