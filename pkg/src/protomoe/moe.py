"""Mixture-of-experts layers.

The prototype-routed layer implements the two-step forward: tokens are
hard-partitioned by conditioning, unconditional tokens go through the
unconditional experts, conditional tokens are scored against learnable
prototypes and dispatched to their top-K standard experts, and the shared
experts are added for every token. Training also returns the weighted
routing contrastive loss as the layer's auxiliary loss.

Baselines with the same interface: a dense FFN, a linear token-choice
router with softmax gating, an online k-means router, and a sample-level
classifier router.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .experts import ExpertFFN, ExpertPool, make_expert, make_segmented_pool, segmented_inner_dim
from .losses import RCLConfig, load_balance_loss, rcl_loss
from .router import (
    ACTIVATIONS,
    GatingResult,
    KMeansState,
    Prototypes,
    TokenPartition,
    activate,
    classifier_route,
    kmeans_assign,
    kmeans_init,
    kmeans_update,
    linear_router_scores,
    make_prototypes,
    prototype_scores,
    topk_gate,
)
from . import rng
from .tensor import ConfigError, ShapeError, Tensor, tensor, zeros


@dataclass
class MoELayerConfig:
    """Expert counts and routing knobs; string form E{total}A{K}S{N_s}U{N_u}."""

    n_experts: int = 12
    top_k: int = 1
    n_shared: int = 1
    n_uncond: int = 1
    activation: str = "identity"
    alpha: float = 1.0
    rcl: RCLConfig = field(default_factory=RCLConfig)
    lb_weight: float = 0.0  # traditional load-balance loss, ablation only
    n_act: int | None = None  # segmentation divisor; default top_k + n_shared

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} out of range for {self.n_experts} experts")
        if self.n_shared < 0 or self.n_uncond < 0:
            raise ConfigError("expert counts must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def config_string(self) -> str:
        total = self.n_experts + self.n_shared + self.n_uncond
        return f"E{total}A{self.top_k}S{self.n_shared}U{self.n_uncond}"

    @property
    def activated_per_token(self) -> int:
        return self.n_act if self.n_act is not None else self.top_k + self.n_shared


@dataclass
class RoutingLog:
    """Numpy snapshot of one forward's routing decisions, for metrics/export."""

    n_experts: int
    indices: np.ndarray  # n_c x K
    gates: np.ndarray  # n_c x K
    token_ids: np.ndarray  # n_c, flat positions into the B*L grid
    n_tokens: int
    n_cond: int
    n_uncond: int
    rcl: float = 0.0
    lb: float = 0.0


@dataclass
class LayerOutput:
    """output matches the input shape; aux_loss is the pre-weighted extra loss."""

    output: Tensor
    aux_loss: Tensor
    log: RoutingLog
    cls_scores: Tensor | None = None  # classifier-router affinities, for the CE loss
    cls_sample_mask: np.ndarray | None = None  # which samples those scores cover


def _empty_log(n_experts: int, n_tokens: int, n_cond: int, n_uncond: int,
               k: int = 1) -> RoutingLog:
    return RoutingLog(
        n_experts=n_experts,
        indices=np.zeros((0, k), dtype=np.int64),
        gates=np.zeros((0, k)),
        token_ids=np.zeros(0, dtype=np.int64),
        n_tokens=n_tokens, n_cond=n_cond, n_uncond=n_uncond,
    )


def dispatch_topk(x: Tensor, experts: list[ExpertFFN], gates: Tensor,
                  indices: np.ndarray) -> Tensor:
    """Gate-weighted sum of expert outputs, one masked pass per expert.

    Each expert runs only on the tokens whose top-K set contains it;
    contributions accumulate, so a token selected by several experts
    receives their weighted sum.
    """
    out = zeros(x.shape, dtype=x.dtype)
    for e, expert in enumerate(experts):
        member = (indices == e).any(axis=1)
        if not member.any():
            continue
        onehot = (indices[member] == e).astype(x.dtype)
        gate_e = (gates.gather_rows(member) * onehot).sum(axis=1).reshape(-1, 1)
        piece = expert(x.gather_rows(member)) * gate_e
        out = out.scatter_add_rows(member, piece)
    return out


def _sum_experts(experts: list[ExpertFFN], x: Tensor) -> Tensor:
    out = experts[0](x)
    for e in experts[1:]:
        out = out + e(x)
    return out


def prototype_moe_forward(x: Tensor, partition: TokenPartition, pool: ExpertPool,
                          proto: Prototypes, cfg: MoELayerConfig, train: bool,
                          forced_indices: np.ndarray | None = None) -> LayerOutput:
    """Two-step routed forward over a [B, L, D] batch.

    forced_indices pins the top-K selection (used by gradient checks that
    must hold routing fixed at the linearization point).
    """
    if x.ndim != 3:
        raise ShapeError(f"expected [B, L, D] input, got {x.shape}")
    b, l, d = x.shape
    if len(pool.standard) != cfg.n_experts:
        raise ConfigError(f"pool has {len(pool.standard)} standard experts, config says {cfg.n_experts}")
    mu = partition.flat_uncond
    mc = partition.flat_cond
    if mu.shape[0] != b * l:
        raise ConfigError(f"partition covers {mu.shape[0]} tokens, batch has {b * l}")

    flat = x.reshape(b * l, d)
    out = zeros((b * l, d), dtype=x.dtype)
    aux = tensor(np.zeros((), dtype=x.dtype))
    log = _empty_log(cfg.n_experts, b * l, int(mc.sum()), int(mu.sum()), cfg.top_k)

    if mu.any() and pool.uncond:
        ou = _sum_experts(pool.uncond, flat.gather_rows(mu))
        out = out.scatter_rows(mu, ou)

    if mc.any():
        xc = flat.gather_rows(mc)
        scores = activate(prototype_scores(xc, proto), cfg.activation)
        if forced_indices is None:
            gating = topk_gate(scores, cfg.top_k)
        else:
            gating = GatingResult(gates=scores.take_along_rows(forced_indices),
                                  indices=np.asarray(forced_indices), scores=scores)
        oc = dispatch_topk(xc, pool.standard, gating.gates, gating.indices)
        out = out.scatter_add_rows(mc, oc)

        log.indices = gating.indices.copy()
        log.gates = gating.gates.data.copy()
        log.token_ids = np.nonzero(mc)[0]

        if train:
            rcl = rcl_loss(xc, gating.indices, proto, cfg.rcl)
            aux = aux + rcl * cfg.rcl.lambda_rcl
            log.rcl = float(rcl.data)
            if cfg.lb_weight > 0.0:
                lb = load_balance_loss(gating.scores, gating.indices)
                aux = aux + lb * cfg.lb_weight
                log.lb = float(lb.data)

    if pool.shared:
        out = out + _sum_experts(pool.shared, flat)

    return LayerOutput(output=out.reshape(b, l, d), aux_loss=aux, log=log)


def tc_moe_forward(x: Tensor, pool: ExpertPool, router_w: Tensor, k: int,
                   train: bool, lb_weight: float = 0.0) -> LayerOutput:
    """Token-choice baseline: linear scores, softmax, top-K, weighted sum."""
    if x.ndim != 3:
        raise ShapeError(f"expected [B, L, D] input, got {x.shape}")
    b, l, d = x.shape
    flat = x.reshape(b * l, d)
    logits = linear_router_scores(flat, router_w)
    probs = activate(logits, "softmax")
    gating = topk_gate(probs, k)
    out = dispatch_topk(flat, pool.standard, gating.gates, gating.indices)
    if pool.shared:
        out = out + _sum_experts(pool.shared, flat)

    aux = tensor(np.zeros((), dtype=x.dtype))
    log = RoutingLog(
        n_experts=len(pool.standard),
        indices=gating.indices.copy(),
        gates=gating.gates.data.copy(),
        token_ids=np.arange(b * l),
        n_tokens=b * l, n_cond=b * l, n_uncond=0,
    )
    if train and lb_weight > 0.0:
        lb = load_balance_loss(logits, gating.indices)
        aux = aux + lb * lb_weight
        log.lb = float(lb.data)
    return LayerOutput(output=out.reshape(b, l, d), aux_loss=aux, log=log)


# -- layer containers with a uniform interface --------------------------------


class PrototypeMoELayer:
    """Prototype-routed MoE layer owning its expert pool and prototypes."""

    def __init__(self, dim: int, cfg: MoELayerConfig, seed: int,
                 dtype=np.float64, name: str = "moe"):
        self.cfg = cfg
        self.pool = make_segmented_pool(
            dim, cfg.n_experts, cfg.n_shared, cfg.n_uncond,
            cfg.activated_per_token, seed, dtype=dtype, purpose=f"{name}/experts")
        self.proto = make_prototypes(cfg.n_experts, dim, seed, alpha=cfg.alpha,
                                     dtype=dtype, purpose=f"{name}/prototypes")

    def forward(self, x: Tensor, partition: TokenPartition, train: bool,
                forced_indices: np.ndarray | None = None) -> LayerOutput:
        return prototype_moe_forward(x, partition, self.pool, self.proto,
                                     self.cfg, train, forced_indices)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        named = _pool_params(self.pool, prefix)
        named[f"{prefix}proto.p"] = self.proto.p
        return named

    def extra_state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {}


class DenseFFNLayer:
    """Dense baseline occupying the same block slot (inner dim 4*D)."""

    def __init__(self, dim: int, seed: int, dtype=np.float64, name: str = "ffn"):
        gen = rng.stream(seed, f"{name}/dense")
        self.ffn = make_expert(dim, segmented_inner_dim(dim, 1), gen, dtype=dtype)

    def forward(self, x: Tensor, partition: TokenPartition, train: bool) -> LayerOutput:
        b, l, d = x.shape
        out = self.ffn(x.reshape(b * l, d)).reshape(b, l, d)
        return LayerOutput(output=out, aux_loss=tensor(np.zeros((), dtype=x.dtype)),
                           log=_empty_log(1, b * l, b * l, 0))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return dict(zip((f"{prefix}ffn.w1", f"{prefix}ffn.b1",
                         f"{prefix}ffn.w2", f"{prefix}ffn.b2"), self.ffn.parameters()))

    def extra_state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {}


class TokenChoiceMoELayer:
    """Linear-router token-choice baseline (no conditional partitioning)."""

    def __init__(self, dim: int, cfg: MoELayerConfig, seed: int,
                 dtype=np.float64, name: str = "tcmoe"):
        self.cfg = cfg
        self.pool = make_segmented_pool(
            dim, cfg.n_experts, cfg.n_shared, 0, cfg.activated_per_token,
            seed, dtype=dtype, purpose=f"{name}/experts")
        gen = rng.stream(seed, f"{name}/router")
        lim = 1.0 / np.sqrt(dim)
        self.router_w = Tensor(gen.uniform(-lim, lim, size=(dim, cfg.n_experts)).astype(dtype),
                               requires_grad=True)

    def forward(self, x: Tensor, partition: TokenPartition, train: bool) -> LayerOutput:
        return tc_moe_forward(x, self.pool, self.router_w, self.cfg.top_k,
                              train, self.cfg.lb_weight)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        named = _pool_params(self.pool, prefix)
        named[f"{prefix}router.w"] = self.router_w
        return named

    def extra_state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {}


class KMeansMoELayer:
    """Online k-means routing over conditional tokens, hard top-1 gates.

    Centroids initialize from the first conditional batch and, while
    training, are replaced by their assigned-token means once per forward.
    """

    def __init__(self, dim: int, cfg: MoELayerConfig, seed: int,
                 dtype=np.float64, name: str = "kmeans"):
        self.cfg = cfg
        self.seed = seed
        self.name = name
        self.pool = make_segmented_pool(
            dim, cfg.n_experts, cfg.n_shared, cfg.n_uncond,
            cfg.activated_per_token, seed, dtype=dtype, purpose=f"{name}/experts")
        self.state: KMeansState | None = None

    def forward(self, x: Tensor, partition: TokenPartition, train: bool) -> LayerOutput:
        b, l, d = x.shape
        mu, mc = partition.flat_uncond, partition.flat_cond
        flat = x.reshape(b * l, d)
        out = zeros((b * l, d), dtype=x.dtype)
        log = _empty_log(self.cfg.n_experts, b * l, int(mc.sum()), int(mu.sum()))

        if mu.any() and self.pool.uncond:
            out = out.scatter_rows(mu, _sum_experts(self.pool.uncond, flat.gather_rows(mu)))

        if mc.any():
            xc = flat.gather_rows(mc)
            if self.state is None:
                self.state = kmeans_init(xc.data, self.cfg.n_experts, self.seed,
                                         purpose=f"{self.name}/init")
            assign = kmeans_assign(xc.data, self.state)
            indices = assign[:, None]
            ones = tensor(np.ones((indices.shape[0], 1), dtype=x.dtype))
            oc = dispatch_topk(xc, self.pool.standard, ones, indices)
            out = out.scatter_add_rows(mc, oc)
            if train:
                self.state = kmeans_update(xc.data, assign, self.state)
            log.indices = indices
            log.gates = np.ones_like(indices, dtype=float)
            log.token_ids = np.nonzero(mc)[0]

        if self.pool.shared:
            out = out + _sum_experts(self.pool.shared, flat)
        return LayerOutput(output=out.reshape(b, l, d),
                           aux_loss=tensor(np.zeros((), dtype=x.dtype)), log=log)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return _pool_params(self.pool, prefix)

    def extra_state(self, prefix: str = "") -> dict[str, np.ndarray]:
        if self.state is None:
            return {}
        return {f"{prefix}kmeans.centroids": self.state.centroids,
                f"{prefix}kmeans.counts": self.state.counts}

    def load_extra_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        key = f"{prefix}kmeans.centroids"
        if key in state:
            self.state = KMeansState(centroids=state[key].copy(),
                                     counts=state[f"{prefix}kmeans.counts"].astype(np.int64))


class ClassifierMoELayer:
    """Sample-level classifier routing; its CE supervision is added by the
    trainer, which owns the superclass labels."""

    def __init__(self, dim: int, cfg: MoELayerConfig, seed: int,
                 dtype=np.float64, name: str = "clsmoe"):
        self.cfg = cfg
        self.pool = make_segmented_pool(
            dim, cfg.n_experts, cfg.n_shared, cfg.n_uncond,
            cfg.activated_per_token, seed, dtype=dtype, purpose=f"{name}/experts")
        gen = rng.stream(seed, f"{name}/classifier")
        lim = 1.0 / np.sqrt(dim)
        self.w_c = Tensor(gen.uniform(-lim, lim, size=(dim, cfg.n_experts)).astype(dtype),
                          requires_grad=True)

    def forward(self, x: Tensor, partition: TokenPartition, train: bool) -> LayerOutput:
        b, l, d = x.shape
        mu, mc = partition.flat_uncond, partition.flat_cond
        rows_c = partition.mask_cond[:, 0]
        flat = x.reshape(b * l, d)
        out = zeros((b * l, d), dtype=x.dtype)
        log = _empty_log(self.cfg.n_experts, b * l, int(mc.sum()), int(mu.sum()))
        cls_scores = None

        if mu.any() and self.pool.uncond:
            out = out.scatter_rows(mu, _sum_experts(self.pool.uncond, flat.gather_rows(mu)))

        if mc.any():
            cls_scores, sample_idx = classifier_route(x.gather_rows(rows_c), self.w_c)
            indices = np.repeat(sample_idx, l)[:, None]
            xc = flat.gather_rows(mc)
            ones = tensor(np.ones((indices.shape[0], 1), dtype=x.dtype))
            oc = dispatch_topk(xc, self.pool.standard, ones, indices)
            out = out.scatter_add_rows(mc, oc)
            log.indices = indices
            log.gates = np.ones_like(indices, dtype=float)
            log.token_ids = np.nonzero(mc)[0]

        if self.pool.shared:
            out = out + _sum_experts(self.pool.shared, flat)
        return LayerOutput(output=out.reshape(b, l, d),
                           aux_loss=tensor(np.zeros((), dtype=x.dtype)), log=log,
                           cls_scores=cls_scores, cls_sample_mask=rows_c.copy())

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        named = _pool_params(self.pool, prefix)
        named[f"{prefix}classifier.w"] = self.w_c
        return named

    def extra_state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {}


def _pool_params(pool: ExpertPool, prefix: str) -> dict[str, Tensor]:
    named: dict[str, Tensor] = {}
    for group in ("standard", "shared", "uncond"):
        for i, expert in enumerate(getattr(pool, group)):
            for pname, p in zip(("w1", "b1", "w2", "b2"), expert.parameters()):
                named[f"{prefix}{group}.{i}.{pname}"] = p
    return named
