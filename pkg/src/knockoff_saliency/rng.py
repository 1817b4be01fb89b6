"""Seeded random streams.

Streams are Philox (counter-based) generators, so a stream for sample ``i``
of a run seeded with ``s`` can be derived independently of every other
sample's stream, which keeps parallel and serial runs identical.
"""

from __future__ import annotations

import os

import numpy as np

from .tensor import DTYPE, Tensor

UNIFORM_EPS = 1e-7


class Rng:
    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self.stream]
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *stream: int) -> "Rng":
        """An independent stream keyed by ``(seed, *self.stream, *stream)``."""
        return Rng(self.seed, *self.stream, *stream)

    def uniform(self, shape, dtype=DTYPE) -> np.ndarray:
        return self.gen.random(shape, dtype=dtype)

    def normal(self, shape, dtype=DTYPE) -> np.ndarray:
        return self.gen.standard_normal(shape, dtype=dtype)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def sample_uniform(rng: Rng, shape, eps: float = UNIFORM_EPS) -> Tensor:
    """Uniform draws clamped to ``[eps, 1 - eps]`` so both logs stay finite."""
    u = rng.uniform(shape, dtype=np.float64)
    return Tensor(np.clip(u, eps, 1.0 - eps))


def default_seed(fallback: int = 0) -> int:
    return int(os.environ.get("KS_SEED", fallback))
