"""Training objectives.

* diffusion regression loss (DDPM noise / rectified-flow velocity targets)
* routing contrastive loss: pulls each active expert's prototype toward
  the centroid of its assigned tokens and pushes it from the other active
  centroids, as an InfoNCE over cosine similarities at temperature tau
* Shazeer-style load-balance loss (kept for ablations)
* cross-entropy loss supervising the classifier router
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .router import Prototypes
from .tensor import ConfigError, ShapeError, Tensor, concat, tensor

OBJECTIVES = ("DDPM", "RF")


@dataclass
class RCLConfig:
    """Routing-contrastive-loss knobs: temperature, weight, centroid gradient."""

    tau: float = 0.07
    lambda_rcl: float = 1.0
    detach_centroids: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


def normalize_objective(kind: str) -> str:
    up = kind.upper()
    if up not in OBJECTIVES:
        raise ConfigError(f"unknown objective {kind!r}; expected one of {OBJECTIVES}")
    return up


def make_target(kind: str, x0: Tensor, eps: Tensor) -> Tensor:
    """DDPM predicts the noise; rectified flow predicts the velocity eps - x0."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    kind = normalize_objective(kind)
    if kind == "DDPM":
        return eps
    return eps - x0


def diffusion_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return (diff * diff).mean()


def rcl_loss(x_c: Tensor, indices: np.ndarray, proto: Prototypes, cfg: RCLConfig) -> Tensor:
    """Contrastive loss over the prototypes of experts active in this batch.

    An expert is active when any token's top-K set contains it; its
    centroid m_i is the plain mean of those tokens. The softmax denominator
    runs over active experts only, so with a single active expert the loss
    is exactly zero. With detach_centroids, no gradient flows into x_c.
    """
    n_c = x_c.shape[0]
    if n_c == 0:
        return tensor(np.zeros((), dtype=x_c.dtype))
    indices = np.asarray(indices)
    if indices.min() < 0 or indices.max() >= proto.n_experts:
        raise ConfigError(f"expert index out of range for {proto.n_experts} experts")

    active = np.unique(indices)  # ascending
    if cfg.detach_centroids:
        # centroids are constants: one dense accumulation instead of a
        # per-expert gather/mean graph
        member = np.stack([(indices == e).any(axis=1) for e in active])
        weights = member / member.sum(axis=1, keepdims=True)
        m = tensor(weights.astype(x_c.dtype) @ x_c.data)  # N_a x D
    else:
        centroids = []
        for e in active:
            member = (indices == e).any(axis=1)
            centroids.append(x_c.gather_rows(member).mean(axis=0).reshape(1, -1))
        m = concat(centroids, axis=0)  # N_a x D

    active_mask = np.zeros(proto.n_experts, dtype=bool)
    active_mask[active] = True
    p_active = proto.p.gather_rows(active_mask)  # rows in ascending expert order

    sims = p_active.l2_normalize(axis=-1) @ m.l2_normalize(axis=-1).T
    logp = (sims * (1.0 / cfg.tau)).log_softmax(axis=-1)
    own = logp.take_along_rows(np.arange(len(active))[:, None])
    return -own.mean()


def load_balance_loss(scores: Tensor, indices: np.ndarray) -> Tensor:
    """N_E * sum_e f_e * P_e with f_e the top-K assignment fraction and P_e
    the mean softmax probability; uniform f and P give exactly 1.0 at K=1."""
    n, n_experts = scores.shape
    if n == 0:
        return tensor(np.zeros((), dtype=scores.dtype))
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=n_experts)
    frac = (counts / n).astype(scores.data.dtype)
    mean_prob = scores.softmax(axis=-1).mean(axis=0)
    return (mean_prob * frac).sum() * float(n_experts)


def routing_cls_loss(scores: Tensor, superclass: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(scores) against superclass labels."""
    labels = np.asarray(superclass, dtype=np.int64)
    n_classes = scores.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"superclass label out of range for {n_classes} classes")
    logp = scores.log_softmax(axis=-1)
    picked = logp.take_along_rows(labels[:, None])
    return -picked.mean()


def total_loss(diff: Tensor, rcl: Tensor, cfg: RCLConfig) -> Tensor:
    """diff + lambda_rcl * rcl."""
    if cfg.lambda_rcl == 0.0:
        return diff
    return diff + rcl * cfg.lambda_rcl
