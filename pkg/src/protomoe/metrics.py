"""Expert-specialization diagnostics.

* subspace similarity: ||U_i^T U_j||_F^2 / k over the top-k left singular
  vectors of two expert weight matrices, computed by seeded orthogonal
  iteration
* expert diversity: mean pairwise subspace similarity of standard experts
* cluster ratio: inter/intra class-distance ratio of token activations
* usage statistics and CSV export of routing assignments
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .experts import ExpertPool
from .moe import RoutingLog
from .tensor import ConfigError


def topk_left_singular(w: np.ndarray, k: int, seed: int = 0,
                       iters: int = 200, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the top-k left singular subspace of `w`.

    Block power iteration on w w^T from a Philox-seeded Gaussian start;
    deterministic given (w, k, seed).
    """
    w = np.asarray(w, dtype=np.float64)
    d, inner = w.shape
    if not 1 <= k <= min(d, inner):
        raise ConfigError(f"k={k} out of range for a {d}x{inner} matrix")
    gen = rng.stream(seed, "subspace-iteration")
    q, _ = np.linalg.qr(gen.standard_normal((d, k)))
    for _ in range(iters):
        z = w @ (w.T @ q)
        q_new, _ = np.linalg.qr(z)
        # subspace movement, invariant to basis rotation
        drift = np.linalg.norm(q_new - q @ (q.T @ q_new))
        q = q_new
        if drift < tol:
            break
    return q


def subspace_similarity(w_i: np.ndarray, w_j: np.ndarray, k: int, seed: int = 0) -> float:
    """Overlap of top-k left singular subspaces, in [0, 1]."""
    u_i = topk_left_singular(w_i, k, seed=seed)
    u_j = topk_left_singular(w_j, k, seed=seed)
    sim = float(np.linalg.norm(u_i.T @ u_j) ** 2 / k)
    return float(np.clip(sim, 0.0, 1.0))


@dataclass
class DiversityReport:
    mean_similarity: float
    k: int
    pair_matrix: np.ndarray  # N x N symmetric, diag 1


def expert_diversity(pool: ExpertPool, k: int = 8, seed: int = 0) -> DiversityReport:
    """Mean pairwise subspace similarity over standard experts' w1 matrices."""
    experts = pool.standard
    if len(experts) < 2:
        raise ConfigError("expert diversity needs at least 2 standard experts")
    n = len(experts)
    mats = [e.w1.data for e in experts]
    k = min(k, min(m.shape[0] for m in mats), min(m.shape[1] for m in mats))
    bases = [topk_left_singular(m, k, seed=seed) for m in mats]
    pair = np.eye(n)
    vals = []
    for i in range(n):
        for j in range(i + 1, n):
            s = float(np.clip(np.linalg.norm(bases[i].T @ bases[j]) ** 2 / k, 0.0, 1.0))
            pair[i, j] = pair[j, i] = s
            vals.append(s)
    return DiversityReport(mean_similarity=float(np.mean(vals)), k=k, pair_matrix=pair)


def cluster_ratio(tokens: np.ndarray, labels: np.ndarray, eps: float = 1e-12) -> float:
    """Mean inter-centroid distance over mean token-to-own-centroid distance."""
    tokens = np.asarray(tokens, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ConfigError("cluster_ratio needs at least 2 distinct labels")
    centroids = np.stack([tokens[labels == u].mean(axis=0) for u in uniq])
    lookup = {u: i for i, u in enumerate(uniq)}
    own = centroids[[lookup[u] for u in labels]]
    intra = float(np.linalg.norm(tokens - own, axis=1).mean())
    dists = [np.linalg.norm(centroids[i] - centroids[j])
             for i in range(len(uniq)) for j in range(i + 1, len(uniq))]
    inter = float(np.mean(dists))
    return inter / max(intra, eps)


@dataclass
class UsageStats:
    counts: np.ndarray  # tokens routed per expert
    fractions: np.ndarray
    entropy: float  # normalized to [0, 1] by log(N_E)


def usage_stats(logs: RoutingLog | Sequence[RoutingLog]) -> UsageStats:
    """Aggregate expert usage over one or more routing logs.

    With no routed tokens the result is vacuously uniform (entropy 1).
    """
    if isinstance(logs, RoutingLog):
        logs = [logs]
    logs = [lg for lg in logs if lg.n_experts > 0]
    n_experts = max(lg.n_experts for lg in logs)
    counts = np.zeros(n_experts, dtype=np.int64)
    for lg in logs:
        if lg.indices.size:
            counts += np.bincount(lg.indices.reshape(-1), minlength=n_experts)
    total = counts.sum()
    if total == 0:
        return UsageStats(counts=counts, fractions=np.zeros(n_experts), entropy=1.0)
    fractions = counts / total
    if n_experts == 1:
        return UsageStats(counts=counts, fractions=fractions, entropy=1.0)
    nz = fractions[fractions > 0]
    h = -float((nz * np.log(nz)).sum()) / np.log(n_experts)
    return UsageStats(counts=counts, fractions=fractions, entropy=float(np.clip(h, 0.0, 1.0)))


def export_assignments(entries: Iterable[tuple[int, int, RoutingLog]], path) -> None:
    """CSV rows (step, layer, token_id, expert_id, gate) for external projection."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "layer", "token_id", "expert_id", "gate"])
            for step, layer, log in entries:
                for row in range(log.indices.shape[0]):
                    tok = int(log.token_ids[row]) if log.token_ids.size else row
                    for slot in range(log.indices.shape[1]):
                        writer.writerow([step, layer, tok,
                                         int(log.indices[row, slot]),
                                         f"{log.gates[row, slot]:.6g}"])
    except OSError as exc:
        raise OSError(f"failed writing assignments to {path}: {exc}") from exc
