"""Command line entry point: ``temporal-distill <verb>``.

Verbs: ``synth-data``, ``pretrain``, ``evaluate``, ``experiment``, ``plot``.
Precedence is defaults < config file < flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .downstream import EvalConfig, evaluate, write_reports
from .experiment import ConfigError, INIT_NAMES, read_json, run_experiment, set_dotted, validate
from .network import BackboneConfig, export_backbone, load_backbone, random_backbone
from .pretrainer import PretrainConfig, pretrain_subset
from .reports import emit_plots
from .scene_store import (
    generate_synthetic_dataset,
    load_labeled_dataset,
    load_scene_dataset,
    write_labeled_dataset,
)


def _config_with_flags(cls, config_path: str | None, flags: dict):
    raw = read_json(config_path) if config_path else {}
    for key, value in flags.items():
        if value is not None:
            set_dotted(raw, key, value)
    return validate(cls, raw, config_path or "<flags>")


def cmd_synth_data(args) -> int:
    ds = generate_synthetic_dataset(args.n_scenes, args.T, args.n_classes, tuple(args.size), args.seed,
                                    out_dir=None if args.labeled else args.out)
    if args.labeled:
        write_labeled_dataset(ds, args.out)
    print(f"wrote {len(ds)} scenes x {ds.T} views to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    flags = {
        "epochs": args.epochs,
        "seed": args.seed,
        "scenes_per_step": args.scenes_per_step,
        "optimizer.lr": args.lr,
    }
    if args.backbone:
        bb = BackboneConfig.for_arch(args.backbone)
        flags["backbone"] = asdict(bb)
        flags["head.in_dim"] = bb.feature_dim
    cfg: PretrainConfig = _config_with_flags(PretrainConfig, args.config, flags)
    if args.augmentation_mode == "artificial_dino":
        cfg = replace(cfg, crop_spec=replace(cfg.crop_spec, artificial_aug=True, allocation="single_view"))
    scenes = load_scene_dataset(args.data, args.T)
    out = Path(args.out)
    last = out / "checkpoints" / "last.ckpt"
    resume_from = last if args.resume and last.exists() else None
    result = pretrain_subset(scenes, args.subset_fraction, cfg, out_dir=out, resume_from=resume_from)
    spec = result.config.crop_spec
    export_backbone(result.pair, out / "checkpoints" / "backbone.ckpt",
                    {"mean": spec.mean, "std": spec.std, "init_name": INIT_NAMES[args.augmentation_mode]})
    (out / "pretrain_config.json").write_text(json.dumps(result.config.to_dict(), indent=2))
    for s in result.epochs:
        print(f"epoch {s.epoch}: loss {s.mean_loss:.4f} teacher entropy {s.teacher_entropy:.3f}")
    print(f"backbone exported to {out / 'checkpoints' / 'backbone.ckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    flags = {
        "mode": args.mode,
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "resolution": args.resolution,
        "label_fractions": args.fractions,
    }
    cfg: EvalConfig = _config_with_flags(EvalConfig, args.config, flags)
    if args.backbone:
        backbone, meta = load_backbone(args.backbone)
        if meta.get("mean") is not None:
            cfg = replace(cfg, mean=tuple(meta["mean"]), std=tuple(meta["std"]))
        init_name = args.init_name or meta.get("init_name", "external_checkpoint")
    else:
        backbone = random_backbone(args.random, cfg.seed)
        init_name = "random"
    reports = []
    for root in args.dataset:
        report = evaluate(backbone, load_labeled_dataset(root), cfg, init_name=init_name,
                          dataset_name=Path(root).name, label=args.label or init_name)
        reports.append(report)
        for r in report.records:
            print(f"{report.dataset_name} {cfg.mode} fraction={r.fraction:g} top1={r.top1_accuracy:.4f} n={r.n_train_used}")
    write_reports(Path(args.out) / "eval_report.jsonl", reports)
    return 0


def cmd_experiment(args) -> int:
    overrides = {"output_dir": str(Path(args.output_dir).resolve())} if args.output_dir else None
    return run_experiment(args.config, overrides)


def cmd_plot(args) -> int:
    for p in emit_plots(args.reports, args.out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="temporal-distill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic temporal scene corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=500)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--size", type=int, nargs=2, default=(128, 128), metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeled", action="store_true", help="write a class-per-folder layout (view 0 of each scene)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="self-supervised pretraining on a scene corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with pretraining config fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--scenes-per-step", type=int)
    p.add_argument("--backbone", choices=("resnet18", "tiny_cnn"))
    p.add_argument("--subset-fraction", type=float, default=1.0)
    p.add_argument("--augmentation-mode", choices=sorted(INIT_NAMES), default="natural_temporal")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/last.ckpt if present")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="linear probing or fine-tuning on labeled datasets")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--backbone", help="exported backbone checkpoint")
    src.add_argument("--random", choices=("resnet18", "tiny_cnn"), help="random-init backbone architecture")
    p.add_argument("--dataset", required=True, action="append")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with evaluation config fields")
    p.add_argument("--mode", choices=("linear_probe", "fine_tune"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--fractions", type=float, nargs="+")
    p.add_argument("--init-name")
    p.add_argument("--label")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run an experiment config end to end")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot", help="accuracy vs label fraction figures from eval reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for line in exc.problems:
            print(line, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
