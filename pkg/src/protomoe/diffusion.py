"""Forward noising, timestep sampling, and samplers.

The forward process is x_t = alpha_t * x0 + sigma_t * eps. DDPM uses the
variance-preserving linear-beta schedule (alpha_t = sqrt(cumprod(1-beta)));
rectified flow uses the straight path alpha_t = 1-t, sigma_t = t.

Samplers operate on plain arrays through a `predict(x, t, labels)`
callable; classifier-free guidance duplicates the batch with null labels,
which is exactly what drives the batch-level unconditional mask inside the
expert layers at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .tensor import ConfigError, ShapeError

TIME_SAMPLERS = ("uniform", "logit_normal")


@dataclass
class Schedule:
    kind: str = "RF"
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    alphas_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in ("DDPM", "RF"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "DDPM":
            betas = np.linspace(self.beta_start, self.beta_end, self.t_steps)
            self.alphas_bar = np.cumprod(1.0 - betas)
        else:
            self.alphas_bar = np.zeros(0)

    def index_of(self, t: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(t) * self.t_steps).astype(np.int64), 0, self.t_steps - 1)

    def alpha_sigma(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=np.float64)
        if (t < 0).any() or (t > 1).any():
            raise ValueError(f"t out of range [0, 1]: {t.min()}..{t.max()}")
        if self.kind == "RF":
            return 1.0 - t, t.copy()
        abar = self.alphas_bar[self.index_of(t)]
        return np.sqrt(abar), np.sqrt(1.0 - abar)


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 1.5

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


def add_noise(x0: np.ndarray, eps: np.ndarray, t: np.ndarray, schedule: Schedule) -> np.ndarray:
    """alpha_t * x0 + sigma_t * eps, with per-sample t broadcast over pixels."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    alpha, sigma = schedule.alpha_sigma(t)
    bshape = (-1,) + (1,) * (x0.ndim - 1)
    return (alpha.reshape(bshape) * x0 + sigma.reshape(bshape) * eps).astype(x0.dtype)


def sample_timesteps(kind: str, b: int, seed: int, step: int = 0) -> np.ndarray:
    """uniform -> U(0,1); logit_normal -> sigmoid(N(0,1)) (location 0, scale 1)."""
    if kind not in TIME_SAMPLERS:
        raise ConfigError(f"unknown timestep sampler {kind!r}")
    gen = rng.stream(seed, f"timesteps/{kind}", step)
    if kind == "uniform":
        return gen.random(b)
    n = gen.standard_normal(b)
    return 1.0 / (1.0 + np.exp(-n))


def cfg_combine(pred_cond: np.ndarray, pred_uncond: np.ndarray, w: float) -> np.ndarray:
    """pred_uncond + w * (pred_cond - pred_uncond); exact at the anchors w in {0, 1}."""
    if pred_cond.shape != pred_uncond.shape:
        raise ShapeError(f"cond {pred_cond.shape} and uncond {pred_uncond.shape} differ")
    if w == 1.0:
        return pred_cond.copy()
    if w == 0.0:
        return pred_uncond.copy()
    return pred_uncond + w * (pred_cond - pred_uncond)


def _predict_with_cfg(predict, x, t_vec, labels, null_label, w):
    if w == 1.0:
        return predict(x, t_vec, labels)
    x2 = np.concatenate([x, x], axis=0)
    t2 = np.concatenate([t_vec, t_vec], axis=0)
    lab2 = np.concatenate([labels, np.full_like(labels, null_label)], axis=0)
    both = predict(x2, t2, lab2)
    n = x.shape[0]
    return cfg_combine(both[:n], both[n:], w)


def rf_euler_sample(predict, shape: tuple[int, ...], labels: np.ndarray,
                    null_label: int, steps: int, cfg_scale: float, seed: int,
                    x_init: np.ndarray | None = None) -> np.ndarray:
    """Euler integration of the predicted velocity from t=1 down to t=0."""
    labels = np.asarray(labels)
    x = rng.stream(seed, "sample-init").standard_normal(shape) if x_init is None else np.array(x_init, dtype=np.float64)
    dt = 1.0 / steps
    for i in range(steps):
        t_now = 1.0 - i * dt
        t_vec = np.full(shape[0], t_now)
        v = _predict_with_cfg(predict, x, t_vec, labels, null_label, cfg_scale)
        x = x - dt * v
    return x


def ddpm_sample(predict, shape: tuple[int, ...], labels: np.ndarray,
                null_label: int, steps: int, cfg_scale: float, seed: int,
                schedule: Schedule, eta: float = 1.0,
                x_init: np.ndarray | None = None) -> np.ndarray:
    """Ancestral sampling from predicted noise; eta=0 is the deterministic variant."""
    if schedule.kind != "DDPM":
        raise ConfigError("ddpm_sample needs a DDPM schedule")
    labels = np.asarray(labels)
    gen = rng.stream(seed, "sample-noise")
    x = rng.stream(seed, "sample-init").standard_normal(shape) if x_init is None else np.array(x_init, dtype=np.float64)

    t_grid = np.unique(np.linspace(schedule.t_steps - 1, 0, steps).round().astype(np.int64))[::-1]
    for pos, idx in enumerate(t_grid):
        abar_t = schedule.alphas_bar[idx]
        abar_prev = schedule.alphas_bar[t_grid[pos + 1]] if pos + 1 < len(t_grid) else 1.0
        t_vec = np.full(shape[0], (idx + 0.5) / schedule.t_steps)
        eps_hat = _predict_with_cfg(predict, x, t_vec, labels, null_label, cfg_scale)
        x0_hat = (x - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
        sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_prev)
        dir_coef = np.sqrt(np.maximum(1.0 - abar_prev - sigma ** 2, 0.0))
        x = np.sqrt(abar_prev) * x0_hat + dir_coef * eps_hat
        if eta > 0 and sigma > 0:
            x = x + sigma * gen.standard_normal(shape)
    return x
