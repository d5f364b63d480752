"""Command-line entry point.

Subcommands: train, sample, gradcheck, ablate, metrics, export-assignments.
Config comes from a JSON file (--config) with flags overriding file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .ablate import PRESETS, run_ablation, variant_run_config
from .data import generate_batch
from .metrics import export_assignments, usage_stats
from .model import VARIANTS, apply_label_dropout
from .train import RunConfig, load_run_checkpoint, sample, train, _diversity_of
from .verify import gradcheck_report, report_passes, COMPOSED_TOL, OP_TOL


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "variant", None):
        cfg = variant_run_config(args.variant, cfg)
    d = cfg.to_dict()
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("out", "output_dir"),
                      ("objective", "objective"), ("batch_size", "batch_size")):
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    if getattr(args, "objective", None):
        d["time_sampling"] = ""  # re-derive the default for the new objective
    return RunConfig.from_dict(d)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = train(cfg, quiet=args.quiet)
    print(f"final checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    print(f"final loss (mean over last 100 steps): {result.final_loss:.6f}")
    return 0


def cmd_sample(args) -> int:
    report = sample(args.checkpoint, n=args.n, cfg_scale=args.cfg_scale,
                    steps=args.steps, out_dir=args.out, use_ema=not args.raw_weights)
    print(f"samples: {report.samples_path}")
    print(f"oracle accuracy: {report.accuracy:.4f} over {report.n} samples "
          f"(cfg_scale={report.cfg_scale}, steps={report.steps})")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_report(args.scope)
    width = max(len(k) for k in report)
    ok = True
    for name, err in report.items():
        tol = COMPOSED_TOL if name.startswith("composed") else OP_TOL
        status = "ok" if err < tol else "FAIL"
        ok &= err < tol
        print(f"{name:<{width}}  max rel err {err:.3e}  (tol {tol:g})  {status}")
    print("gradcheck:", "PASS" if report_passes(report) else "FAIL")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    base = RunConfig.from_json(args.config) if args.config else RunConfig()
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(args.preset, base, steps=args.steps, seeds=seeds,
                        out_dir=args.out, jobs=args.jobs)
    for row in rows:
        print(f"{row['cell']:<14} seed={row['seed']} final_loss={row['final_loss']:.6f} "
              f"entropy={row['final_entropy']:.3f}")
    return 0


def cmd_metrics(args) -> int:
    model, cfg, step = load_run_checkpoint(args.checkpoint, use_ema=not args.raw_weights)
    images, labels, _ = generate_batch(cfg.data, args.batch, cfg.seed, step=0)
    labels = apply_label_dropout(labels, cfg.model.label_dropout, cfg.model.null_label,
                                 cfg.seed, step=0)
    t = np.full(args.batch, 0.5)
    out = model.denoise(images.astype(model.dtype), t, labels)
    routed = [lg for lg in out.logs if lg.indices.size]
    stats = usage_stats(routed) if routed else None
    summary = {
        "checkpoint": str(args.checkpoint),
        "step": step,
        "variant": cfg.model.variant,
        "expert_diversity": _diversity_of(model),
        "usage_entropy": stats.entropy if stats else None,
        "usage_fractions": stats.fractions.tolist() if stats else None,
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_export_assignments(args) -> int:
    model, cfg, step = load_run_checkpoint(args.checkpoint, use_ema=not args.raw_weights)
    images, labels, _ = generate_batch(cfg.data, args.batch, cfg.seed, step=0)
    labels = apply_label_dropout(labels, cfg.model.label_dropout, cfg.model.null_label,
                                 cfg.seed, step=0)
    t = np.full(args.batch, 0.5)
    out = model.denoise(images.astype(model.dtype), t, labels)
    export_assignments([(step, layer, lg) for layer, lg in enumerate(out.logs)], args.out)
    print(f"assignments written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protomoe",
                                     description="Prototype-routed MoE diffusion experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training loop")
    p.add_argument("--config", type=str, help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--objective", choices=["RF", "DDPM", "rf", "ddpm"])
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample from a checkpoint (EMA weights)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--raw-weights", action="store_true", help="use raw (non-EMA) weights")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--scope", choices=["ops", "layer", "full"], default="full")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation preset")
    p.add_argument("--preset", choices=PRESETS, required=True)
    p.add_argument("--config", type=str)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seeds", type=str, default="0")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=str, default="runs/ablations")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="diversity/usage report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--out", type=str)
    p.add_argument("--raw-weights", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export-assignments", help="dump routing assignments as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--raw-weights", action="store_true")
    p.set_defaults(func=cmd_export_assignments)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
