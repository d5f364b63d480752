"""Minimal diffusion-transformer denoiser.

Patch embedding, sinusoidal-MLP timestep embedding, a learnable class
table whose last row is the null label, pre-LN attention blocks whose FFN
slot is one of the expert-layer variants, and a zero-initialized linear
head back to pixel space. Conditioning is additive per token (no adaLN).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .losses import RCLConfig
from .moe import (
    ClassifierMoELayer,
    DenseFFNLayer,
    KMeansMoELayer,
    LayerOutput,
    MoELayerConfig,
    PrototypeMoELayer,
    TokenChoiceMoELayer,
)
from .router import TokenPartition, partition_by_condition
from .tensor import ConfigError, ShapeError, Tensor, tensor

VARIANTS = ("prototype", "dense", "token_choice", "kmeans", "classifier")


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    depth: int = 4
    hidden: int = 64
    heads: int = 1
    num_classes: int = 8
    label_dropout: float = 0.1
    variant: str = "prototype"
    layer: MoELayerConfig = field(default_factory=MoELayerConfig)

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.hidden % 2 != 0:
            raise ConfigError("hidden must be even for the sinusoidal embedding")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def null_label(self) -> int:
        return self.num_classes

    @property
    def tokens_per_image(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass
class DenoiseOutput:
    pred: Tensor  # B x C x H x W
    aux_loss: Tensor  # pre-weighted sum over blocks
    logs: list  # one RoutingLog per block
    cls_terms: list  # (scores, sample_mask) pairs from classifier layers


def sinusoidal_features(t: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Standard sin/cos features of t in [0, 1], spread over `dim` channels."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * scale * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


def apply_label_dropout(labels: np.ndarray, prob: float, null_label: int,
                        seed: int, step: int = 0) -> np.ndarray:
    """Independently replace each label with the null label at rate `prob`."""
    if not 0.0 <= prob <= 1.0:
        raise ConfigError(f"dropout prob must be in [0, 1], got {prob}")
    labels = np.asarray(labels).copy()
    if prob == 0.0:
        return labels
    gen = rng.stream(seed, "label-dropout", step)
    labels[gen.random(labels.shape[0]) < prob] = null_label
    return labels


def _linear_params(gen, d_in, d_out, dtype, zero=False):
    if zero:
        w = np.zeros((d_in, d_out), dtype=dtype)
    else:
        lim = 1.0 / np.sqrt(d_in)
        w = gen.uniform(-lim, lim, size=(d_in, d_out)).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)


class Attention:
    """Multi-head self-attention with a fused QKV-free simple layout."""

    def __init__(self, dim: int, heads: int, seed: int, dtype, name: str):
        gen = rng.stream(seed, f"{name}/attn")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq, self.bq = _linear_params(gen, dim, dim, dtype)
        self.wk, self.bk = _linear_params(gen, dim, dim, dtype)
        self.wv, self.bv = _linear_params(gen, dim, dim, dtype)
        self.wo, self.bo = _linear_params(gen, dim, dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(t):
            return t.reshape(b, l, h, hd).transpose(0, 2, 1, 3)  # B,h,L,hd

        q = split(x @ self.wq + self.bq)
        k = split(x @ self.wk + self.bk)
        v = split(x @ self.wv + self.bv)
        att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        att = att.softmax(axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, l, d)
        return out @ self.wo + self.bo

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}wq": self.wq, f"{prefix}bq": self.bq,
            f"{prefix}wk": self.wk, f"{prefix}bk": self.bk,
            f"{prefix}wv": self.wv, f"{prefix}bv": self.bv,
            f"{prefix}wo": self.wo, f"{prefix}bo": self.bo,
        }


def _make_ffn_layer(variant: str, dim: int, layer_cfg: MoELayerConfig,
                    seed: int, dtype, name: str):
    if variant == "prototype":
        return PrototypeMoELayer(dim, layer_cfg, seed, dtype=dtype, name=name)
    if variant == "dense":
        return DenseFFNLayer(dim, seed, dtype=dtype, name=name)
    if variant == "token_choice":
        return TokenChoiceMoELayer(dim, layer_cfg, seed, dtype=dtype, name=name)
    if variant == "kmeans":
        return KMeansMoELayer(dim, layer_cfg, seed, dtype=dtype, name=name)
    if variant == "classifier":
        return ClassifierMoELayer(dim, layer_cfg, seed, dtype=dtype, name=name)
    raise ConfigError(f"unknown variant {variant!r}")


class Block:
    def __init__(self, cfg: ModelConfig, seed: int, dtype, name: str):
        self.attn = Attention(cfg.hidden, cfg.heads, seed, dtype, name)
        self.ffn = _make_ffn_layer(cfg.variant, cfg.hidden, cfg.layer, seed, dtype, name)

    def __call__(self, x: Tensor, partition: TokenPartition, train: bool) -> tuple[Tensor, LayerOutput]:
        x = x + self.attn(x.layer_norm(axis=-1))
        ffn_out = self.ffn.forward(x.layer_norm(axis=-1), partition, train)
        return x + ffn_out.output, ffn_out

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        named = self.attn.named_parameters(f"{prefix}attn.")
        named.update(self.ffn.named_parameters(f"{prefix}ffn."))
        return named


class MiniDiT:
    """Class-conditional denoiser; labels equal to num_classes mean null."""

    def __init__(self, cfg: ModelConfig, seed: int, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        d = cfg.hidden
        gen = rng.stream(seed, "embeddings")
        self.patch_w, self.patch_b = _linear_params(gen, cfg.patch_dim, d, dtype)
        # learned positional table; without it tokens cannot place their
        # patch when the input is pure noise
        self.pos_table = Tensor(
            gen.standard_normal((cfg.tokens_per_image, d)).astype(dtype) * 0.5,
            requires_grad=True)
        self.time_w1, self.time_b1 = _linear_params(gen, d, d, dtype)
        self.time_w2, self.time_b2 = _linear_params(gen, d, d, dtype)
        # class rows start well separated so additive conditioning carries
        # signal from the first step; the table is trained like any weight
        table = gen.standard_normal((cfg.num_classes + 1, d)).astype(dtype) * 0.5
        self.class_table = Tensor(table, requires_grad=True)
        self.blocks = [Block(cfg, seed, dtype, f"block{i}") for i in range(cfg.depth)]
        # zero-initialized output head (standard diffusion-transformer practice)
        self.head_w, self.head_b = _linear_params(gen, d, cfg.patch_dim, dtype, zero=True)

    # -- token plumbing ------------------------------------------------------

    def patchify(self, x: Tensor) -> Tensor:
        b, c, hh, ww = x.shape
        p = self.cfg.patch_size
        gh, gw = hh // p, ww // p
        t = x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
        return t.reshape(b, gh * gw, c * p * p)

    def unpatchify(self, tokens: Tensor) -> Tensor:
        b = tokens.shape[0]
        c, p = self.cfg.channels, self.cfg.patch_size
        g = self.cfg.image_size // p
        t = tokens.reshape(b, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5)
        return t.reshape(b, c, g * p, g * p)

    # -- forward ------------------------------------------------------

    def denoise(self, x_t, t: np.ndarray, labels: np.ndarray,
                train: bool = False) -> DenoiseOutput:
        cfg = self.cfg
        if not isinstance(x_t, Tensor):
            x_t = Tensor(np.asarray(x_t, dtype=self.dtype))
        b = x_t.shape[0]
        if x_t.shape != (b, cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"input shape {x_t.shape} does not match config")
        labels = np.asarray(labels)
        if labels.shape[0] != b or len(t) != b:
            raise ShapeError("labels and t must have one entry per sample")

        partition = partition_by_condition(labels, cfg.null_label, cfg.tokens_per_image)

        tokens = self.patchify(x_t) @ self.patch_w + self.patch_b
        tokens = tokens + self.pos_table.reshape(1, cfg.tokens_per_image, cfg.hidden)
        t_feat = tensor(sinusoidal_features(t, cfg.hidden).astype(self.dtype))
        t_emb = ((t_feat @ self.time_w1 + self.time_b1).gelu() @ self.time_w2 + self.time_b2)
        c_emb = self.class_table.take_rows(labels)
        tokens = tokens + (t_emb + c_emb).reshape(b, 1, cfg.hidden)

        aux = tensor(np.zeros((), dtype=self.dtype))
        logs, cls_terms = [], []
        for block in self.blocks:
            tokens, ffn_out = block(tokens, partition, train)
            aux = aux + ffn_out.aux_loss
            logs.append(ffn_out.log)
            if ffn_out.cls_scores is not None:
                cls_terms.append((ffn_out.cls_scores, ffn_out.cls_sample_mask))

        out = tokens.layer_norm(axis=-1) @ self.head_w + self.head_b
        return DenoiseOutput(pred=self.unpatchify(out), aux_loss=aux,
                             logs=logs, cls_terms=cls_terms)

    # -- parameters and state ------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        named = {
            "patch.w": self.patch_w, "patch.b": self.patch_b,
            "pos.table": self.pos_table,
            "time.w1": self.time_w1, "time.b1": self.time_b1,
            "time.w2": self.time_w2, "time.b2": self.time_b2,
            "class.table": self.class_table,
            "head.w": self.head_w, "head.b": self.head_b,
        }
        for i, block in enumerate(self.blocks):
            named.update(block.named_parameters(f"blocks.{i}."))
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def extra_state(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks):
            state.update(block.ffn.extra_state(f"blocks.{i}.ffn."))
        return state

    def load_extra_state(self, state: dict[str, np.ndarray]) -> None:
        for i, block in enumerate(self.blocks):
            loader = getattr(block.ffn, "load_extra_state", None)
            if loader is not None:
                loader(state, f"blocks.{i}.ffn.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())
