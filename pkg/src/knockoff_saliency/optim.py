"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, ShapeError, Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, params: Tensor, grads: np.ndarray) -> AdamState:
    """Apply one in-place Adam update to ``params`` and advance ``state``."""
    g = np.asarray(grads)
    if g.shape != params.shape:
        raise ShapeError(f"adam_step: grad shape {g.shape} does not match params {params.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError(f"adam_step: non-finite gradient at step {state.step + 1}")
    if state.m is None:
        state.m = np.zeros_like(params.data)
        state.v = np.zeros_like(params.data)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    params.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.data.dtype)
    return state


@dataclass
class Adam:
    """Adam over a fixed list of parameter tensors, one state per tensor."""

    params: list[Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.states = [AdamState(self.lr, self.beta1, self.beta2, self.eps) for _ in self.params]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(s, p, g)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
