"""Expert feed-forward networks and fine-grained segmentation.

Each expert is a two-layer FFN. When a token activates `n_act` experts
(routed + shared), every expert's inner dimension is 4*D / n_act, so the
weight parameters touched per token equal a dense FFN with inner
dimension 4*D exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .tensor import ConfigError, ShapeError, Tensor

DENSE_RATIO = 4  # standard transformer FFN expansion


@dataclass
class ExpertFFN:
    """Two-layer feed-forward expert: w2 @ act(w1 @ x + b1) + b2, row-wise."""

    w1: Tensor  # D x d_inner
    b1: Tensor  # d_inner
    w2: Tensor  # d_inner x D
    b2: Tensor  # D
    activation: str = "gelu"

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @property
    def d_inner(self) -> int:
        return self.w1.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expert expects width {self.dim}, got {x.shape}")
        h = x @ self.w1 + self.b1
        if self.activation == "gelu":
            h = h.gelu()
        elif self.activation != "identity":
            raise ConfigError(f"unknown expert activation {self.activation!r}")
        return h @ self.w2 + self.b2

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def weight_param_count(self) -> int:
        """Weight-matrix parameters only (biases excluded)."""
        return self.dim * self.d_inner * 2

    def param_count(self) -> int:
        return self.dim * self.d_inner * 2 + self.d_inner + self.dim


@dataclass
class ExpertPool:
    """Standard (routed), shared, and unconditional experts of one layer."""

    standard: list[ExpertFFN] = field(default_factory=list)
    shared: list[ExpertFFN] = field(default_factory=list)
    uncond: list[ExpertFFN] = field(default_factory=list)

    def all_experts(self) -> list[ExpertFFN]:
        return self.standard + self.shared + self.uncond

    @property
    def dim(self) -> int:
        return self.all_experts()[0].dim

    @property
    def d_inner(self) -> int:
        return self.all_experts()[0].d_inner

    def parameters(self) -> list[Tensor]:
        return [p for e in self.all_experts() for p in e.parameters()]


def make_expert(dim: int, d_inner: int, gen: np.random.Generator,
                activation: str = "gelu", dtype=np.float64) -> ExpertFFN:
    """Fan-in scaled uniform init; biases start at zero."""
    lim1 = 1.0 / np.sqrt(dim)
    lim2 = 1.0 / np.sqrt(d_inner)
    w1 = Tensor(gen.uniform(-lim1, lim1, size=(dim, d_inner)).astype(dtype), requires_grad=True)
    b1 = Tensor(np.zeros(d_inner, dtype=dtype), requires_grad=True)
    w2 = Tensor(gen.uniform(-lim2, lim2, size=(d_inner, dim)).astype(dtype), requires_grad=True)
    b2 = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    return ExpertFFN(w1, b1, w2, b2, activation)


def segmented_inner_dim(dim: int, n_act: int) -> int:
    """Inner dimension after dividing the dense 4*D width by `n_act`."""
    if n_act < 1:
        raise ConfigError(f"n_act must be >= 1, got {n_act}")
    total = DENSE_RATIO * dim
    if total % n_act != 0:
        raise ConfigError(f"4*D = {total} is not divisible by n_act = {n_act}")
    return total // n_act


def make_segmented_pool(dim: int, n_standard: int, n_shared: int, n_uncond: int,
                        n_act: int, seed: int, activation: str = "gelu",
                        dtype=np.float64, purpose: str = "experts") -> ExpertPool:
    """Build a pool whose activated weight parameters match the dense FFN."""
    d_inner = segmented_inner_dim(dim, n_act)
    pool = ExpertPool()
    for group, count in (("standard", n_standard), ("shared", n_shared), ("uncond", n_uncond)):
        experts = getattr(pool, group)
        for i in range(count):
            gen = rng.stream(seed, f"{purpose}/{group}/{i}")
            experts.append(make_expert(dim, d_inner, gen, activation, dtype))
    return pool


def dense_weight_params(dim: int) -> int:
    """Weight parameters of the dense baseline FFN (inner dim 4*D)."""
    return 2 * dim * (DENSE_RATIO * dim)


def activated_weight_params(pool: ExpertPool, k: int) -> int:
    """Weight parameters touched per conditional token: k routed + all shared."""
    if not pool.standard:
        raise ConfigError("pool has no standard experts")
    per = pool.standard[0].weight_param_count()
    return k * per + sum(e.weight_param_count() for e in pool.shared)
