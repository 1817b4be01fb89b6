"""Counterfactual mask optimisation over relaxed per-pixel dropout.

A keep-probability ``theta`` per pixel defines a Bernoulli mask; masks are
relaxed with the binary Concrete distribution so the classifier's log-odds on
the composed image ``z*x + (1-z)*x_hat`` can be differentiated with respect to
``theta``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .infill import Infiller
from .optim import AdamState, adam_step
from .rng import Rng, sample_uniform
from .tensor import NumericError, ShapeError, Tensor

log = logging.getLogger(__name__)

SSR = "ssr"
SDR = "sdr"
OBJECTIVES = (SSR, SDR)
THETA_EPS = 1e-6
PROB_EPS = 1e-6
Z_EPS = 1e-7
# log-odds at the probability clamp [1e-6, 1 - 1e-6]
LOGODDS_CAP = math.log((1 - PROB_EPS) / PROB_EPS)


class RejectedInputError(ValueError):
    """The classifier does not predict the requested class on the clean input."""


@dataclass
class OptConfig:
    lr: float = 1e-3
    sparsity: float = 1e-3
    tv_weight: float = 0.01
    batch_masks: int = 8
    iterations: int = 300
    temperature: float = 0.1
    seed: int = 0
    paper_signs: bool = False
    # "direct": Adam on theta itself, clipped to [0, 1]; "logit": Adam on logits through a sigmoid
    parameterization: str = "direct"

    def __post_init__(self):
        for name in ("lr", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"OptConfig.{name} must be positive")
        for name in ("sparsity", "tv_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"OptConfig.{name} must be non-negative")
        if self.batch_masks < 1 or self.iterations < 1:
            raise ValueError("OptConfig needs batch_masks >= 1 and iterations >= 1")
        if self.parameterization not in ("direct", "logit"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")

    @classmethod
    def for_dataset(cls, variant: str, **overrides) -> "OptConfig":
        """Defaults with the smaller learning rate used on the two-class subsets."""
        base = {"lr": 5e-4} if variant != "full" else {}
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConcreteSample:
    z_tilde: Tensor
    temperature: float
    u: np.ndarray


@dataclass
class DropoutParams:
    theta: np.ndarray
    objective: str
    target: int
    infill: str = "flip"
    sample_id: int = 0
    loss_trace: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return float(self.loss_trace[-1]) if self.loss_trace else float("nan")


@dataclass
class SaliencyMap:
    values: np.ndarray
    objective: str
    infill: str
    sample_id: int = 0

    @property
    def oriented_theta(self) -> np.ndarray:
        return self.values + 0.5


def logit(theta) -> Tensor:
    th = T.clip(T.as_tensor(theta), THETA_EPS, 1 - THETA_EPS)
    return T.log(th) - T.log(1.0 - th)


def sample_concrete(theta, t: float, rng: Rng | None = None, n: int | None = None, u=None) -> ConcreteSample:
    """Relaxed Bernoulli(theta) masks, ``sigmoid((logit theta + logit u) / t)``.

    ``n`` adds a leading batch axis of independent draws.  Pass ``u`` to hold
    the noise fixed.
    """
    if not t > 0:
        raise ValueError("temperature must be positive")
    theta = T.as_tensor(theta)
    if u is None:
        if rng is None:
            raise ValueError("sample_concrete needs rng or u")
        shape = theta.shape if n is None else (n, *theta.shape)
        u = sample_uniform(rng, shape).data
    u = np.asarray(u, dtype=np.float64)
    noise = Tensor((np.log(u) - np.log1p(-u)).astype(theta.data.dtype), dtype=theta.data.dtype)
    z = T.sigmoid((logit(theta) + noise) * (1.0 / t))
    # float32 sigmoid saturates to exactly 0 or 1; keep samples strictly inside
    z = T.clip(z, Z_EPS, float(np.nextafter(np.float32(1), np.float32(0))))
    return ConcreteSample(z, t, u)


def compose(x, z, x_hat):
    """``z * x + (1 - z) * x_hat``; a Tensor ``z`` yields a Tensor.

    ``x`` and ``x_hat`` may omit the leading batch axis of ``z``.
    """
    zs, xs, hs = np.shape(z.data if isinstance(z, Tensor) else z), np.shape(x), np.shape(x_hat)
    if xs[-2:] != zs[-2:] or hs[-2:] != zs[-2:]:
        raise ShapeError(f"compose: image {xs}, mask {zs} and reference {hs} disagree")
    try:
        np.broadcast_shapes(xs, zs, hs)
    except ValueError:
        raise ShapeError(f"compose: image {xs}, mask {zs} and reference {hs} disagree") from None
    if isinstance(z, Tensor):
        x = np.asarray(x, dtype=z.data.dtype)
        x_hat = np.asarray(x_hat, dtype=z.data.dtype)
        return z * Tensor(x) + (1.0 - z) * Tensor(x_hat)
    z = np.asarray(z)
    return z * x + (1.0 - z) * x_hat


def log_odds(classifier, x, c: int) -> Tensor:
    """Per-image log-odds of class ``c``, ``log p_c - log(1 - p_c)``.

    Computed from the logits as ``z_c - logsumexp(z_other)`` and capped at the
    value a probability clamped to ``[1e-6, 1 - 1e-6]`` would give.
    """
    z = classifier.logits(x)
    n, k = z.shape
    ci = classifier.class_index(c)
    onehot = np.zeros((1, k), dtype=z.data.dtype)
    onehot[0, ci] = 1
    others = 1 - onehot
    m = np.where(others.astype(bool), z.data, -np.inf).max(axis=1, keepdims=True)
    # the target column is pushed far below the others before exp so it cannot overflow
    shifted = (z - Tensor(m)) * Tensor(others) + Tensor(onehot * -60.0)
    lse = T.log(T.exp(shifted).sum(axis=1)) + Tensor(m[:, 0])
    s = (z * Tensor(onehot)).sum(axis=1) - lse
    return T.clip(s, -LOGODDS_CAP, LOGODDS_CAP)


def log_odds_from_prob(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    return np.log(p) - np.log1p(-p)


def _diff_matrix(n: int, dtype) -> np.ndarray:
    d = np.zeros((n - 1, n), dtype=dtype)
    idx = np.arange(n - 1)
    d[idx, idx] = -1
    d[idx, idx + 1] = 1
    return d


def tv_penalty(m) -> Tensor:
    """Squared anisotropic total variation of a 2-D map."""
    m = T.as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"tv_penalty expects a 2-D map, got {m.shape}")
    h, w = m.shape
    total = Tensor(np.zeros((), dtype=m.data.dtype))
    if h > 1:
        dv = Tensor(_diff_matrix(h, m.data.dtype)) @ m
        total = total + (dv * dv).sum()
    if w > 1:
        dh = m @ Tensor(_diff_matrix(w, m.data.dtype).T)
        total = total + (dh * dh).sum()
    return total


def mask_objective(classifier, x, c, z: Tensor, x_hat, objective: str, sparsity: float,
                   paper_signs: bool = False) -> Tensor:
    """Score term averaged over the mask batch plus the per-mask L1 term.

    SSR minimises ``-s + lambda*|z|_1`` and SDR ``s + lambda*|1-z|_1``;
    ``paper_signs`` negates the score term of both.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    n = z.shape[0]
    s = log_odds(classifier, compose(x, z, x_hat), c).mean()
    sign = -1.0 if objective == SSR else 1.0
    if paper_signs:
        sign = -sign
    l1 = z.sum() if objective == SSR else (1.0 - z).sum()
    return s * sign + l1 * (sparsity / n)


def optimize_mask(classifier, infiller: Infiller, x: np.ndarray, c: int, objective: str, cfg: OptConfig,
                  rng: Rng | None = None, sample_id: int = 0, check_prediction: bool = True) -> DropoutParams:
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    x = np.asarray(x, dtype=np.float32)
    if check_prediction:
        pred = int(classifier.predict(x[None])[0])
        if pred != int(c):
            raise RejectedInputError(f"sample {sample_id}: classifier predicts {pred}, not {c}")
    rng = rng if rng is not None else Rng(cfg.seed, sample_id)
    direct = cfg.parameterization == "direct"
    param = Tensor(np.full(x.shape, 0.5 if direct else 0.0, dtype=np.float32), requires_grad=True)
    state = AdamState(cfg.lr)
    trace = []
    for it in range(cfg.iterations):
        try:
            theta = param if direct else T.sigmoid(param)
            z = sample_concrete(theta, cfg.temperature, rng, n=cfg.batch_masks).z_tilde
            x_hat = infiller.reference(x, z.data, rng)
            loss = mask_objective(classifier, x, c, z, x_hat, objective, cfg.sparsity, cfg.paper_signs)
            if cfg.tv_weight:
                loss = loss + tv_penalty(theta) * cfg.tv_weight
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError("non-finite loss")
            param.grad = None
            T.backward(loss)
            adam_step(state, param, param.grad if param.grad is not None else np.zeros_like(param.data))
        except NumericError as exc:
            raise NumericError(f"sample {sample_id}, iteration {it}: {exc}") from exc
        if direct:
            np.clip(param.data, THETA_EPS, 1 - THETA_EPS, out=param.data)
        trace.append(value)
    theta = param.data.copy() if direct else T._stable_sigmoid(param.data)
    return DropoutParams(theta.astype(np.float32), objective, int(c), infiller.name, sample_id, trace)


def oriented(theta: np.ndarray, objective: str) -> np.ndarray:
    return theta if objective == SSR else 1.0 - theta


def to_saliency(params: DropoutParams) -> SaliencyMap:
    """``oriented(theta) - 0.5``, so positive always marks important pixels."""
    return SaliencyMap(oriented(params.theta, params.objective) - 0.5, params.objective, params.infill,
                       params.sample_id)
