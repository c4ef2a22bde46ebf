"""Command-line entry point.

Subcommands: synth, pretrain, adapt, eval, analyze, ablate. Every command
writes its resolved run config next to its outputs so a run can be
reproduced from the artifact directory alone; failures leave a FAILED marker
file and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis, plots, runner
from .config import RunConfig, parse_override
from .data import export_dataset, load_dataset
from .model import load_checkpoint, save_checkpoint
from .trainer import init_state, adapt

FAILURE_MARKER = "FAILED"

# published full-scale mIoU references for the sweeps (context only, never gates)
FULL_SCALE_REFERENCES = {
    "selection": {"HIGHEST": 68.6, "RANDOM": 62.4, "LOWEST": 56.6},
    "conf_threshold": {
        "0": 67.5, "0.1": 68.2, "0.2": 68.6, "0.3": 68.0,
        "0.4": 67.7, "0.5": 67.3, "0.6": 67.4,
    },
    "queue_length": {
        "50K": 68.3, "55K": 68.0, "60K": 68.4, "65K": 68.6,
        "70K": 68.1, "75K": 68.2, "80K": 67.9,
    },
}

GRIDS: dict[str, list[dict[str, object]]] = {
    "selection": [{"hp.selection": s} for s in ("HIGHEST", "RANDOM", "LOWEST")],
    "conf_threshold": [
        {"hp.conf_threshold": t} for t in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    ],
    "queue_length": [
        {"hp.queue_length": q} for q in (256, 512, 1024, 2048, 4096, 8192, 16384)
    ],
    "loss_toggles": [
        {"hp.use_self": False, "hp.use_spec": False},
        {"hp.use_spec": False},
        {},
        {"hp.use_resto": False, "hp.use_dis": False},
        {"hp.use_dis": False},
        {"hp.use_resto": True, "hp.use_dis": True},
    ],
}


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = dict(parse_override(s) for s in args.set or [])
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if args.seed is not None:
        cfg = cfg.with_overrides({"data.seed": args.seed, "train.seed": args.seed})
    if args.out is not None:
        cfg = cfg.with_overrides({"out_dir": args.out})
    return cfg


def _splits(cfg: RunConfig):
    if cfg.dataset_dir:
        return load_dataset(cfg.dataset_dir)
    return runner.build_splits(cfg)


def cmd_synth(cfg: RunConfig, args) -> None:
    splits = runner.build_splits(cfg)
    export_dataset(splits, cfg.out_dir)


def cmd_pretrain(cfg: RunConfig, args) -> None:
    out = Path(cfg.out_dir)
    splits = _splits(cfg)
    model = runner.fresh_model(cfg)
    from .trainer import pretrain_source

    history = pretrain_source(
        model, splits.source, cfg.train.pretrain_epochs, cfg.train.pretrain_lr,
        seed=cfg.train.seed,
    )
    normal_val = analysis.evaluate_pairs(model, splits.val, view="normal")
    save_checkpoint(model, out / "pretrain.pt", seed=cfg.train.seed,
                    extra={"normal_val_miou": normal_val["miou"]})
    (out / "pretrain_metrics.json").write_text(json.dumps(
        {"epoch_loss": history, "normal_val_miou": normal_val["miou"]}, indent=2) + "\n")


def cmd_adapt(cfg: RunConfig, args) -> None:
    if not cfg.pretrain_checkpoint:
        raise ValueError("adapt requires pretrain_checkpoint (use --set pretrain_checkpoint=PATH)")
    out = Path(cfg.out_dir)
    splits = _splits(cfg)
    model, _ = load_checkpoint(cfg.pretrain_checkpoint)
    state = init_state(model, cfg.hp, cfg.train)
    adapt(state, splits, cfg.train.total_iters, out)
    plots.render_loss_curves(out / "metrics.jsonl", out / "loss_curves.png")


def cmd_eval(cfg: RunConfig, args) -> None:
    if not cfg.checkpoint:
        raise ValueError("eval requires checkpoint (use --set checkpoint=PATH)")
    out = Path(cfg.out_dir)
    splits = _splits(cfg)
    model, _ = load_checkpoint(cfg.checkpoint)
    report = {
        "schema_version": 1,
        "adverse": analysis.evaluate_pairs(model, splits.val, view="adverse"),
        "normal": analysis.evaluate_pairs(model, splits.val, view="normal"),
        "feature_compare": analysis.inference_feature_compare(model, splits.val),
    }
    (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_analyze(cfg: RunConfig, args) -> None:
    run_dir = Path(cfg.run_dir or cfg.out_dir)
    out = Path(cfg.out_dir)
    checkpoints = sorted(run_dir.glob("epoch_*.pt"))
    if len(checkpoints) < 2:
        raise ValueError(f"need >= 2 epoch checkpoints in {run_dir}")
    splits = _splits(cfg)
    report = analysis.shift_report(
        checkpoints, splits.val, subsample=cfg.shift_subsample, seed=cfg.train.seed
    )
    report.to_json(out / "shift_report.json")
    plots.render_shift_report(report, out / "shift_report.png")
    final = run_dir / "final.pt"
    model, _ = load_checkpoint(final if final.exists() else checkpoints[-1])
    analysis.export_embeddings(model, splits.val, out / "embeddings.csv")


def cmd_ablate(cfg: RunConfig, args) -> None:
    out = Path(cfg.out_dir)
    grid_name = args.grid
    if grid_name not in GRIDS:
        raise ValueError(f"unknown grid {grid_name!r}; choose from {sorted(GRIDS)}")
    seeds = tuple(int(s) for s in (args.seeds or "0,1,2").split(","))
    rows = analysis.ablation_run(GRIDS[grid_name], cfg, seeds=seeds, out_dir=out / "cells")
    analysis.write_ablation_csv(rows, out / f"{grid_name}.csv")
    plots.render_ablation(rows, out / f"{grid_name}.png", title=grid_name)
    if grid_name in FULL_SCALE_REFERENCES:
        (out / f"{grid_name}_references.json").write_text(
            json.dumps(FULL_SCALE_REFERENCES[grid_name], indent=2) + "\n"
        )


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frest-kit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="path to a run config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-key config override, repeatable")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--device", type=str, default=None)
        if name == "ablate":
            p.add_argument("--grid", type=str, default="selection",
                           choices=sorted(GRIDS))
            p.add_argument("--seeds", type=str, default=None,
                           help="comma-separated seed list (default 0,1,2)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(int(os.environ.get("FREST_KIT_THREADS", "1")))
    try:
        cfg = _resolve_config(args)
        if args.device:
            cfg = cfg.with_overrides({"device": args.device})
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "run_config.json")
        torch.manual_seed(cfg.train.seed)
        np.random.seed(cfg.train.seed)
        COMMANDS[args.command](cfg, args)
    except Exception as exc:
        out_dir = Path(getattr(args, "out", None) or "runs/default")
        if out_dir.exists():
            (out_dir / FAILURE_MARKER).write_text(f"{type(exc).__name__}: {exc}\n")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
