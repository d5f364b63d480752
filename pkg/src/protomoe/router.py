"""Routing mechanisms.

Two-step routing = conditional partitioning (sample-level hard split into
unconditional vs conditional tokens) followed by prototypical routing
(scaled cosine similarity between tokens and learnable per-expert
prototypes, top-K selection). Comparison routers live here too: a linear
token-choice router, an online k-means router, and a sample-level
classifier router.

Tie-breaking is lowest-index everywhere, which keeps every routing
decision reproducible against brute-force oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .tensor import ConfigError, ShapeError, Tensor

ACTIVATIONS = ("identity", "sigmoid", "softmax")


@dataclass
class TokenPartition:
    """Complementary boolean masks over a [B, L] token grid."""

    mask_uncond: np.ndarray
    mask_cond: np.ndarray

    @property
    def flat_uncond(self) -> np.ndarray:
        return self.mask_uncond.reshape(-1)

    @property
    def flat_cond(self) -> np.ndarray:
        return self.mask_cond.reshape(-1)

    @property
    def n_uncond(self) -> int:
        return int(self.mask_uncond.sum())

    @property
    def n_cond(self) -> int:
        return int(self.mask_cond.sum())


def partition_by_condition(labels: np.ndarray, null_label: int, seq_len: int) -> TokenPartition:
    """Samples with the null label contribute all their tokens to the uncond set."""
    labels = np.asarray(labels)
    uncond_rows = labels == null_label
    mask_uncond = np.repeat(uncond_rows[:, None], seq_len, axis=1)
    return TokenPartition(mask_uncond=mask_uncond, mask_cond=~mask_uncond)


def partition_from_mask(uncond_rows: np.ndarray, seq_len: int) -> TokenPartition:
    """Batch-level binary mask variant used at inference with CFG."""
    uncond_rows = np.asarray(uncond_rows, dtype=bool)
    mask_uncond = np.repeat(uncond_rows[:, None], seq_len, axis=1)
    return TokenPartition(mask_uncond=mask_uncond, mask_cond=~mask_uncond)


@dataclass
class Prototypes:
    """One learnable prototype row per standard expert, scored by scaled cosine."""

    p: Tensor  # N_E x D
    alpha: float = 1.0

    @property
    def n_experts(self) -> int:
        return self.p.shape[0]

    @property
    def dim(self) -> int:
        return self.p.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.p]


def make_prototypes(n_experts: int, dim: int, seed: int, alpha: float = 1.0,
                    dtype=np.float64, purpose: str = "prototypes") -> Prototypes:
    """Unit-norm Gaussian rows; cosine scoring makes the scale irrelevant."""
    gen = rng.stream(seed, purpose)
    p = gen.standard_normal((n_experts, dim))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return Prototypes(Tensor(p.astype(dtype), requires_grad=True), alpha=alpha)


def prototype_scores(x_c: Tensor, proto: Prototypes) -> Tensor:
    """Z[i, j] = alpha * cos(x_i, p_j), with epsilon-guarded normalization."""
    if x_c.shape[-1] != proto.dim:
        raise ShapeError(f"token width {x_c.shape} does not match prototype width {proto.dim}")
    xn = x_c.l2_normalize(axis=-1)
    pn = proto.p.l2_normalize(axis=-1)
    scores = xn @ pn.T
    if proto.alpha != 1.0:
        scores = scores * proto.alpha
    return scores


def activate(z: Tensor, kind: str) -> Tensor:
    """Map pre-activation scores to affinities over the expert axis."""
    if kind == "identity":
        return z
    if kind == "sigmoid":
        return z.sigmoid()
    if kind == "softmax":
        return z.softmax(axis=-1)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


@dataclass
class GatingResult:
    """Per-token top-K selection: gate values, expert indices, full affinities."""

    gates: Tensor  # n_c x K, differentiable slice of scores
    indices: np.ndarray  # n_c x K int
    scores: Tensor  # n_c x N_E

    @property
    def top_k(self) -> int:
        return self.indices.shape[1]


def topk_gate(scores: Tensor, k: int) -> GatingResult:
    """Row-wise K largest affinities; ties break toward the lowest expert index."""
    n_experts = scores.shape[-1]
    if not 1 <= k <= n_experts:
        raise ConfigError(f"top_k={k} out of range for {n_experts} experts")
    # stable sort on negated scores keeps the lowest index first among ties
    order = np.argsort(-scores.data, axis=-1, kind="stable")
    indices = np.ascontiguousarray(order[:, :k])
    gates = scores.take_along_rows(indices)
    return GatingResult(gates=gates, indices=indices, scores=scores)


def linear_router_scores(x_c: Tensor, w_r: Tensor) -> Tensor:
    """Standard MoE pre-activation scores via a linear layer."""
    if x_c.shape[-1] != w_r.shape[0]:
        raise ShapeError(f"token width {x_c.shape} does not match router {w_r.shape}")
    return x_c @ w_r


# -- k-means router ------------------------------------------------------


@dataclass
class KMeansState:
    """Online k-means centroids; `counts` holds last-update assignment sizes."""

    centroids: np.ndarray  # N_E x D
    counts: np.ndarray  # N_E int

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]


def kmeans_init(tokens: np.ndarray, n_clusters: int, seed: int,
                purpose: str = "kmeans-init") -> KMeansState:
    """Sample n_clusters distinct tokens as the initial centroids."""
    tokens = np.asarray(tokens)
    if tokens.shape[0] < n_clusters:
        raise ConfigError(f"need at least {n_clusters} tokens to initialize, got {tokens.shape[0]}")
    gen = rng.stream(seed, purpose)
    chosen = gen.choice(tokens.shape[0], size=n_clusters, replace=False)
    return KMeansState(centroids=tokens[chosen].copy(),
                       counts=np.zeros(n_clusters, dtype=np.int64))


def kmeans_assign(x_c: np.ndarray, state: KMeansState,
                  return_scores: bool = False):
    """Nearest centroid per token (Euclidean); ties go to the lowest index.

    With return_scores, also returns negated squared distances as the
    distance-based token-expert affinities kept for logging.
    """
    x_c = np.asarray(x_c)
    c = state.centroids
    d2 = (x_c * x_c).sum(axis=1, keepdims=True) - 2.0 * (x_c @ c.T) + (c * c).sum(axis=1)
    indices = np.argmin(d2, axis=1)
    if return_scores:
        return indices, -d2
    return indices


def kmeans_update(x_c: np.ndarray, indices: np.ndarray, state: KMeansState) -> KMeansState:
    """Replace each non-empty centroid by the mean of its assigned tokens."""
    x_c = np.asarray(x_c)
    n = state.n_clusters
    counts = np.bincount(indices, minlength=n).astype(np.int64)
    sums = np.zeros_like(state.centroids)
    np.add.at(sums, indices, x_c)
    new_centroids = state.centroids.copy()
    nonempty = counts > 0
    new_centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    return KMeansState(centroids=new_centroids, counts=counts)


# -- classifier router ------------------------------------------------------


def classifier_route(x: Tensor, w_c: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample-level routing: pool tokens, score with a classifier, take argmax.

    Returns (sample-expert affinity scores [B, N_c], expert index per sample).
    All tokens of a sample follow its argmax expert; ties go to the lowest index.
    """
    if x.ndim != 3:
        raise ShapeError(f"expected [B, L, D] input, got {x.shape}")
    if x.shape[-1] != w_c.shape[0]:
        raise ShapeError(f"token width {x.shape} does not match classifier {w_c.shape}")
    pooled = x.mean(axis=1)  # B x D
    scores = pooled @ w_c
    indices = np.argmax(scores.data, axis=1)
    return scores, indices
