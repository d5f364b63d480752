"""Experiment harness: configs, optimizer, EMA, training loop, sampling.

One run = (RunConfig, seed) -> metrics.csv + checkpoints + report.json,
fully deterministic: every random draw comes from a keyed Philox stream,
so repeated runs produce bit-identical artifacts.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import SynthSpec, generate_batch, oracle_classify, superclass_of
from .diffusion import SamplerConfig, Schedule, add_noise, ddpm_sample, rf_euler_sample, sample_timesteps
from .losses import RCLConfig, diffusion_loss, make_target, normalize_objective, routing_cls_loss
from .metrics import expert_diversity, usage_stats
from .model import MiniDiT, ModelConfig, apply_label_dropout
from .moe import MoELayerConfig
from .tensor import ConfigError, Tensor, no_grad, tensor

FORMAT_VERSION = 1


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    objective: str = "RF"
    time_sampling: str = ""  # default: logit_normal for RF, uniform for DDPM
    batch_size: int = 32
    steps: int = 5000
    ema_decay: float = 0.9999
    seed: int = 0
    lambda_cls: float = 1.0  # classifier-router CE weight
    eval_every: int = 500
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 250
    dtype: str = "float32"
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.objective = normalize_objective(self.objective)
        if not self.time_sampling:
            self.time_sampling = "logit_normal" if self.objective == "RF" else "uniform"
        if self.model.variant == "classifier" and self.model.layer.n_experts != self.data.num_superclasses:
            raise ConfigError(
                f"classifier routing allocates one expert per superclass: "
                f"n_experts={self.model.layer.n_experts} vs {self.data.num_superclasses} superclasses")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    # -- JSON round trip ------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        if "model" in d:
            m = dict(d["model"])
            if "layer" in m:
                layer = dict(m["layer"])
                if "rcl" in layer:
                    layer["rcl"] = RCLConfig(**layer["rcl"])
                m["layer"] = MoELayerConfig(**layer)
            d["model"] = ModelConfig(**m)
        if "data" in d:
            d["data"] = SynthSpec(**d["data"])
        if "sampler" in d:
            d["sampler"] = SamplerConfig(**d["sampler"])
        if "optim" in d:
            d["optim"] = OptimConfig(**d["optim"])
        return RunConfig(**d)

    @staticmethod
    def from_json(path) -> "RunConfig":
        with open(path) as fh:
            return RunConfig.from_dict(json.load(fh))


class Adam:
    """Adam with bias correction; parameters without a gradient this step
    are treated as having a zero gradient (moments still decay)."""

    def __init__(self, params: list[Tensor], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.scratch = [np.empty_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        step_size = c.lr / bc1
        inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
        for p, m, v, s in zip(self.params, self.m, self.v, self.scratch):
            m *= c.beta1
            v *= c.beta2
            if p.grad is not None:
                g = p.grad
                np.multiply(g, 1.0 - c.beta1, out=s)
                m += s
                np.multiply(g, g, out=s)
                s *= 1.0 - c.beta2
                v += s
            if c.weight_decay:
                p.data *= 1.0 - c.lr * c.weight_decay
            np.sqrt(v, out=s)
            s *= inv_sqrt_bc2
            s += c.eps
            np.divide(m, s, out=s)
            s *= step_size
            p.data -= s

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class EMA:
    """Zero-debiased exponential moving average of parameters.

    The recursive-mean form s += alpha_t * (theta - s) with
    alpha_t = (1 - d) / (1 - d^t) equals the bias-corrected EMA of the
    update theta_ema <- d * theta_ema + (1 - d) * theta. For long runs
    (d^t -> 0) it converges to the plain EMA; for short runs it is a true
    average of the visited parameters instead of being anchored at the
    initialization. Constant parameters are reproduced bit-exactly.
    """

    def __init__(self, named: dict[str, Tensor], decay: float):
        if not 0.0 <= decay < 1.0:
            raise ConfigError(f"ema decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.t = 0
        self.shadow = {k: p.data.copy() for k, p in named.items()}
        self._named = named

    def update(self) -> None:
        self.t += 1
        d = self.decay
        alpha = (1.0 - d) / (1.0 - d ** self.t)
        for k, p in self._named.items():
            s = self.shadow[k]
            s += alpha * (p.data - s)


@dataclass
class TrainResult:
    config: RunConfig
    model: MiniDiT
    ema: EMA
    metrics_path: Path
    checkpoint_path: Path
    diff_losses: np.ndarray  # per-step diffusion loss
    final_loss: float  # mean diffusion loss over the final 100 steps
    final_entropy: float
    final_diversity: float


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _collect_tensors(model: MiniDiT, ema: EMA) -> dict[str, np.ndarray]:
    out = {f"model/{k}": p.data for k, p in model.named_parameters().items()}
    out.update({f"ema/{k}": v for k, v in ema.shadow.items()})
    out.update({f"state/{k}": v for k, v in model.extra_state().items()})
    return out


def save_run_checkpoint(path, cfg: RunConfig, model: MiniDiT, ema: EMA, step: int) -> None:
    meta = {"format_version": FORMAT_VERSION, "step": step, "config": cfg.to_dict()}
    save_checkpoint(path, _collect_tensors(model, ema), meta)


def load_run_checkpoint(path, use_ema: bool = True) -> tuple[MiniDiT, RunConfig, int]:
    tensors, meta = load_checkpoint(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('format_version')} "
                              f"!= {FORMAT_VERSION}")
    cfg = RunConfig.from_dict(meta["config"])
    model = MiniDiT(cfg.model, seed=cfg.seed, dtype=cfg.np_dtype)
    prefix = "ema/" if use_ema else "model/"
    for name, p in model.named_parameters().items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor {key!r}")
        if tensors[key].shape != p.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {key!r}: "
                                  f"{tensors[key].shape} vs {p.data.shape}")
        p.data = tensors[key].astype(p.data.dtype, copy=True)
    model.load_extra_state({k[len("state/"):]: v for k, v in tensors.items()
                            if k.startswith("state/")})
    return model, cfg, int(meta["step"])


def _diversity_of(model: MiniDiT, k: int = 8) -> float:
    vals = []
    for block in model.blocks:
        pool = getattr(block.ffn, "pool", None)
        if pool is not None and len(pool.standard) >= 2:
            vals.append(expert_diversity(pool, k=k).mean_similarity)
    return float(np.mean(vals)) if vals else float("nan")


def train(cfg: RunConfig, quiet: bool = False) -> TrainResult:
    """Seeded loop: batch -> label dropout -> noise -> forward -> loss ->
    Adam step -> EMA update, with per-step metrics rows and checkpoints."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)

    dtype = cfg.np_dtype
    model = MiniDiT(cfg.model, seed=cfg.seed, dtype=dtype)
    named = model.named_parameters()
    opt = Adam(list(named.values()), cfg.optim)
    ema = EMA(named, cfg.ema_decay)
    schedule = Schedule(kind=cfg.objective)
    null = cfg.model.null_label

    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "checkpoint.ntc"
    diff_losses = np.zeros(cfg.steps)
    entropy = 1.0
    diversity = float("nan")
    t_start = time.perf_counter()

    with open(metrics_path, "w") as mfh:
        mfh.write("step,loss_diff,loss_rcl,loss_lb,loss_cls,loss_total,usage_entropy,diversity\n")
        for step in range(cfg.steps):
            images, labels, supers = generate_batch(cfg.data, cfg.batch_size, cfg.seed, step)
            labels_d = apply_label_dropout(labels, cfg.model.label_dropout, null, cfg.seed, step)
            t = sample_timesteps(cfg.time_sampling, cfg.batch_size, cfg.seed, step)
            eps = rng.stream(cfg.seed, "train-noise", step).standard_normal(
                images.shape, dtype=np.float32).astype(dtype, copy=False)
            images = images.astype(dtype, copy=False)
            x_t = add_noise(images, eps, t, schedule)

            out = model.denoise(x_t, t, labels_d, train=True)
            target = make_target(cfg.objective, tensor(images), tensor(eps))
            diff = diffusion_loss(out.pred, target)
            loss = diff + out.aux_loss
            cls_val = 0.0
            for scores, mask in out.cls_terms:
                cls = routing_cls_loss(scores, supers[mask])
                loss = loss + cls * cfg.lambda_cls
                cls_val += float(cls.data)

            if not np.isfinite(float(loss.data)):
                diag = {"step": step, "loss": float(loss.data),
                        "diff": float(diff.data), "aux": float(out.aux_loss.data)}
                with open(out_dir / "nan_diagnostic.json", "w") as fh:
                    json.dump(diag, fh, indent=2)
                raise RuntimeError(f"non-finite loss at step {step}: {diag}")

            opt.zero_grad()
            loss.backward()
            opt.step()
            ema.update()

            diff_losses[step] = float(diff.data)
            rcl_val = float(np.mean([lg.rcl for lg in out.logs])) if out.logs else 0.0
            lb_val = float(np.mean([lg.lb for lg in out.logs])) if out.logs else 0.0
            routed = [lg for lg in out.logs if lg.indices.size]
            entropy = usage_stats(routed).entropy if routed else 1.0

            is_eval = (cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0) or step + 1 == cfg.steps
            if is_eval:
                diversity = _diversity_of(model)
            div_str = "" if not is_eval or np.isnan(diversity) else _fmt(diversity)
            mfh.write(",".join([str(step), _fmt(diff_losses[step]), _fmt(rcl_val),
                                _fmt(lb_val), _fmt(cls_val), _fmt(float(loss.data)),
                                _fmt(entropy), div_str]) + "\n")

            if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
                save_run_checkpoint(out_dir / f"checkpoint-{step + 1}.ntc", cfg, model, ema, step + 1)
            if not quiet and cfg.log_every > 0 and (step + 1) % cfg.log_every == 0:
                rate = (step + 1) / (time.perf_counter() - t_start)
                print(f"[{cfg.model.variant}/seed{cfg.seed}] step {step + 1}/{cfg.steps} "
                      f"diff={diff_losses[step]:.4f} entropy={entropy:.3f} ({rate:.1f} it/s)",
                      flush=True)

    save_run_checkpoint(ckpt_path, cfg, model, ema, cfg.steps)
    tail = diff_losses[-min(100, max(cfg.steps, 1)):] if cfg.steps else np.array([float("nan")])
    result = TrainResult(config=cfg, model=model, ema=ema,
                         metrics_path=metrics_path, checkpoint_path=ckpt_path,
                         diff_losses=diff_losses,
                         final_loss=float(np.mean(tail)),
                         final_entropy=float(entropy),
                         final_diversity=float(diversity))
    with open(out_dir / "report.json", "w") as fh:
        json.dump({"steps": cfg.steps, "final_loss": result.final_loss,
                   "final_entropy": result.final_entropy,
                   "final_diversity": result.final_diversity,
                   "config_string": cfg.model.layer.config_string}, fh, indent=2, sort_keys=True)
    return result


# -- sampling ------------------------------------------------------


@dataclass
class SampleReport:
    n: int
    cfg_scale: float
    steps: int
    accuracy: float
    uncond_branch_forwards: int  # forwards where the batch-level mask was active
    samples_path: str
    index_path: str


def make_predictor(model: MiniDiT, objective: str, branch_counter: list | None = None):
    """Wrap the denoiser for samplers; counts mixed-batch (CFG-mask) forwards."""
    dtype = model.dtype

    def predict(x, t, labels):
        with no_grad():
            out = model.denoise(x.astype(dtype), t, labels.astype(np.int64))
        if branch_counter is not None and out.logs:
            lg = out.logs[0]
            if lg.n_uncond > 0 and lg.n_cond > 0:
                branch_counter.append(1)
        return out.pred.data.astype(np.float64)

    return predict


def sample(checkpoint_path, n: int, cfg_scale: float | None = None,
           steps: int | None = None, out_dir=None, use_ema: bool = True,
           labels: np.ndarray | None = None, seed: int | None = None) -> SampleReport:
    """Sample n images from a checkpoint (EMA weights by default) and score
    them with the template-matching oracle."""
    model, cfg, _ = load_run_checkpoint(checkpoint_path, use_ema=use_ema)
    out_dir = Path(out_dir) if out_dir is not None else Path(checkpoint_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_scale = cfg.sampler.cfg_scale if cfg_scale is None else cfg_scale
    steps = cfg.sampler.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed

    if labels is None:
        labels = np.arange(n, dtype=np.int64) % cfg.data.num_classes
    shape = (n, cfg.model.channels, cfg.model.image_size, cfg.model.image_size)
    counter: list = []
    predict = make_predictor(model, cfg.objective, counter)

    samples = np.zeros(shape)
    if n > 0:
        chunk = 64
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            sub_shape = (hi - lo,) + shape[1:]
            if cfg.objective == "RF":
                samples[lo:hi] = rf_euler_sample(
                    predict, sub_shape, labels[lo:hi], cfg.model.null_label,
                    steps, cfg_scale, seed + lo)
            else:
                samples[lo:hi] = ddpm_sample(
                    predict, sub_shape, labels[lo:hi], cfg.model.null_label,
                    steps, cfg_scale, seed + lo, Schedule(kind="DDPM"))

    predicted = oracle_classify(samples, cfg.data) if n else np.zeros(0, dtype=np.int64)
    accuracy = float((predicted == labels).mean()) if n else float("nan")

    samples_path = out_dir / "samples.ntc"
    save_checkpoint(samples_path, {"samples": samples.astype(np.float32)},
                    {"n": n, "cfg_scale": cfg_scale, "steps": steps})
    index_path = out_dir / "samples_index.csv"
    with open(index_path, "w") as fh:
        fh.write("sample_id,label,predicted\n")
        for i in range(n):
            fh.write(f"{i},{int(labels[i])},{int(predicted[i])}\n")

    report = SampleReport(n=n, cfg_scale=cfg_scale, steps=steps, accuracy=accuracy,
                          uncond_branch_forwards=len(counter),
                          samples_path=str(samples_path), index_path=str(index_path))
    with open(out_dir / "sample_report.json", "w") as fh:
        json.dump(dataclasses.asdict(report), fh, indent=2, sort_keys=True)
    return report
