"""Prototype-routed mixture-of-experts layers for small diffusion
transformers, with baseline routers, a training harness, and expert
specialization metrics."""

from .tensor import ConfigError, ShapeError, Tensor, gradcheck, no_grad
from .experts import ExpertFFN, ExpertPool, make_segmented_pool
from .router import Prototypes, TokenPartition, partition_by_condition, topk_gate
from .losses import RCLConfig, diffusion_loss, load_balance_loss, make_target, rcl_loss
from .moe import LayerOutput, MoELayerConfig, PrototypeMoELayer, prototype_moe_forward
from .model import MiniDiT, ModelConfig
from .diffusion import SamplerConfig, Schedule, add_noise, cfg_combine, ddpm_sample, rf_euler_sample
from .data import SynthSpec, generate_batch, oracle_classify
from .metrics import cluster_ratio, expert_diversity, subspace_similarity, usage_stats
from .train import RunConfig, TrainResult, sample, train

__version__ = "0.1.0"
