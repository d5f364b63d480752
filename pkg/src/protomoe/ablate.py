"""Ablation presets and the parallel cell runner.

Every preset expands into (cell, seed) training runs sharing the base
config and seeds; one CSV row per cell reports the final training loss,
usage entropy, and expert diversity.
"""

from __future__ import annotations

import copy
import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .tensor import ConfigError
from .train import RunConfig, train

PRESETS = ("activation", "load_balance", "lambda_rcl", "experts", "variants")


def variant_run_config(variant: str, base: RunConfig) -> RunConfig:
    """Rewire a base config for one layer variant, keeping activated
    parameters matched to the dense baseline."""
    d = base.to_dict()
    d["model"]["variant"] = variant
    layer = d["model"]["layer"]
    if variant == "token_choice":
        # DiT-MoE-style: routed experts only, top-1 at full width, LB loss on
        layer.update(n_shared=0, n_uncond=0, n_act=1, lb_weight=0.01)
    elif variant == "classifier":
        layer.update(n_experts=d["data"]["num_superclasses"])
    return RunConfig.from_dict(d)


def _with(base: RunConfig, **layer_overrides) -> dict:
    d = base.to_dict()
    d["model"]["layer"].update(layer_overrides)
    return d


def preset_cells(preset: str, base: RunConfig) -> list[tuple[str, dict]]:
    """(cell name, config dict) pairs for one preset."""
    if preset == "activation":
        return [(kind, _with(base, activation=kind))
                for kind in ("identity", "sigmoid", "softmax")]
    if preset == "load_balance":
        return [("rcl_only", _with(base, lb_weight=0.0)),
                ("rcl_plus_lb", _with(base, lb_weight=0.01))]
    if preset == "lambda_rcl":
        cells = []
        for lam in (0.0, 1.0, 2.0, 5.0, 10.0):
            d = base.to_dict()
            d["model"]["layer"]["rcl"]["lambda_rcl"] = lam
            cells.append((f"lambda{lam:g}", d))
        return cells
    if preset == "experts":
        # total experts 4/8/14/16, always 1 shared + 1 unconditional
        return [(f"E{total}", _with(base, n_experts=total - 2))
                for total in (4, 8, 14, 16)]
    if preset == "variants":
        return [(v, variant_run_config(v, base).to_dict())
                for v in ("prototype", "dense", "token_choice", "kmeans", "classifier")]
    raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")


def _run_cell(args: tuple[dict, str]) -> dict:
    cfg_dict, cell = args
    cfg = RunConfig.from_dict(cfg_dict)
    result = train(cfg, quiet=True)
    return {
        "cell": cell,
        "seed": cfg.seed,
        "final_loss": result.final_loss,
        "final_entropy": result.final_entropy,
        "final_diversity": result.final_diversity,
    }


def run_ablation(preset: str, base: RunConfig, steps: int, seeds: list[int],
                 out_dir, jobs: int = 1) -> list[dict]:
    """Run the preset matrix with shared seeds; returns and writes CSV rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = max(1, jobs)

    tasks = []
    for cell, cfg_dict in preset_cells(preset, base):
        for seed in seeds:
            d = copy.deepcopy(cfg_dict)
            d["seed"] = seed
            d["steps"] = steps
            d["output_dir"] = str(out_dir / f"{cell}-seed{seed}")
            tasks.append((d, cell))

    if jobs == 1:
        rows = [_run_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))

    csv_path = out_dir / f"ablation_{preset}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["cell", "seed", "final_loss",
                                                "final_entropy", "final_diversity"])
        writer.writeheader()
        writer.writerows(rows)
    return rows
