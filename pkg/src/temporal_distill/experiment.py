"""Config-driven experiment runner: pretrain, export, evaluate, plot.

A config is one JSON document. ``"pretrain": "none"`` gives a random-init
baseline. ``variants`` lists named runs whose ``overrides`` (dotted keys)
are applied on top of the base config, e.g. two pretraining budgets or the
two augmentation modes. Each run writes into ``output_dir/<variant>`` and
records its progress in ``manifest.json``; rerunning skips finished stages.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import subprocess
import traceback
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

import pydantic
from pydantic import ConfigDict, TypeAdapter

from . import __version__
from .downstream import EvalConfig, StepSchedule, evaluate, write_reports
from .network import BackboneConfig, HeadConfig, export_backbone, load_backbone, random_backbone
from .pretrainer import (
    DistillConfig,
    OptimizerConfig,
    PretrainConfig,
    _deterministic,
    pretrain_subset,
)
from .reports import emit_plots
from .scene_store import load_labeled_dataset, load_scene_dataset
from .view_sampler import CropSpec

log = logging.getLogger(__name__)

INIT_NAMES = {"natural_temporal": "s3tss", "artificial_dino": "dino_artificial"}


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    output_dir: str
    datasets: tuple[str, ...] = ()
    pretrain_data: str | None = None
    T: int = 5
    subset_fraction: float = 1.0
    pretrain: PretrainConfig | None = field(default_factory=PretrainConfig)
    augmentation_mode: Literal["natural_temporal", "artificial_dino"] = "natural_temporal"
    eval: EvalConfig = field(default_factory=EvalConfig)
    modes: tuple[Literal["linear_probe", "fine_tune"], ...] = ("linear_probe", "fine_tune")
    # backbone used when pretrain is "none"
    init_arch: Literal["resnet18", "tiny_cnn"] = "resnet18"
    variants: tuple[Variant, ...] = ()

    def __post_init__(self) -> None:
        if self.pretrain is not None and not self.pretrain_data:
            raise ValueError("pretrain_data is required unless pretrain is 'none'")
        if not 0 < self.subset_fraction <= 1:
            raise ValueError("subset_fraction must lie in (0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.modes:
            raise ValueError("at least one evaluation mode is required")

    @property
    def init_name(self) -> str:
        return "random" if self.pretrain is None else INIT_NAMES[self.augmentation_mode]

    def crop_spec(self) -> CropSpec:
        spec = self.pretrain.crop_spec
        if self.augmentation_mode == "artificial_dino":
            return replace(spec, artificial_aug=True, allocation="single_view")
        return replace(spec, artificial_aug=False)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


_STRICT = ConfigDict(extra="forbid")
for _cls in (Variant, ExperimentConfig, PretrainConfig, OptimizerConfig, DistillConfig, CropSpec,
             BackboneConfig, HeadConfig, EvalConfig, StepSchedule):
    _cls.__pydantic_config__ = _STRICT  # type: ignore[attr-defined]


def _loc(parts) -> str:
    return ".".join(str(p) for p in parts if not str(p).startswith("function-"))


def validate(cls, data: dict, source: str = "<config>"):
    """Build dataclass ``cls`` from plain data, collecting field-level problems."""
    try:
        return TypeAdapter(cls).validate_python(data)
    except pydantic.ValidationError as exc:
        problems = [f"{source}: field '{_loc(e['loc']) or '<root>'}': {e['msg']}" for e in exc.errors()]
        raise ConfigError(problems) from None


def read_json(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return data


def set_dotted(data: dict, key: str, value: Any) -> None:
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def _normalize_raw(raw: dict) -> dict:
    raw = copy.deepcopy(raw)
    if raw.get("pretrain") == "none":
        raw["pretrain"] = None
    return raw


def _resolve_paths(raw: dict, base: Path) -> dict:
    def fix(p):
        return str((base / p).resolve()) if p and not Path(p).is_absolute() else p

    if "output_dir" in raw:
        raw["output_dir"] = fix(raw["output_dir"])
    if raw.get("pretrain_data"):
        raw["pretrain_data"] = fix(raw["pretrain_data"])
    if "datasets" in raw:
        raw["datasets"] = [fix(d) for d in raw["datasets"]]
    return raw


def load_experiment(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Parse and validate a config file; relative paths resolve against its directory."""
    path = Path(path)
    raw = read_json(path)
    for k, v in (overrides or {}).items():
        set_dotted(raw, k, v)
    raw = _resolve_paths(_normalize_raw(raw), path.parent)
    cfg = validate(ExperimentConfig, raw, str(path))
    # variants are validated eagerly so a bad override fails before any work
    for v in cfg.variants:
        variant_config(cfg, v, str(path))
    return cfg


def variant_config(cfg: ExperimentConfig, variant: Variant, source: str = "<config>") -> ExperimentConfig:
    raw = asdict(cfg)
    raw["variants"] = []
    if raw["pretrain"] is None:
        raw["pretrain"] = "none"
    for k, v in variant.overrides.items():
        set_dotted(raw, k, v)
    raw = _normalize_raw(raw)
    return validate(ExperimentConfig, raw, f"{source} (variant {variant.name!r})")


def _git_stamp() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def downstream_protocol(cfg: EvalConfig) -> dict:
    return {
        "optimizer": cfg.optimizer,
        "lr": cfg.lr,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr_schedule": asdict(cfg.lr_schedule),
    }


class _Manifest:
    def __init__(self, path: Path, config: dict, eval_cfg: EvalConfig):
        self.path = path
        self.data = {
            "name": config["name"],
            "version": __version__,
            "git": _git_stamp(),
            "config_hash": _config_hash(config),
            "config": config,
            "stages": {},
            "failures": [],
            "status": "running",
        }
        if path.exists():
            old = json.loads(path.read_text())
            if old.get("config_hash") != self.data["config_hash"]:
                raise ConfigError([f"{path.parent} already holds a run with a different config"])
            self.data["stages"] = old.get("stages", {})
        self.data["downstream_protocol"] = downstream_protocol(eval_cfg)

    def done(self, stage: str) -> bool:
        return self.data["stages"].get(stage) == "done"

    def mark(self, stage: str, status: str = "done") -> None:
        self.data["stages"][stage] = status
        self.save()

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        tmp.replace(self.path)


def run_single(cfg: ExperimentConfig, run_dir: Path, label: str) -> bool:
    """Execute one run; returns True when every stage finished."""
    resolved = asdict(cfg)
    resolved.pop("variants")
    manifest = _Manifest(run_dir / "manifest.json", resolved, cfg.eval)
    manifest.save()
    ok = True

    backbone_path = run_dir / "checkpoints" / "backbone.ckpt"
    if cfg.pretrain is not None and not (manifest.done("pretrain") and backbone_path.exists()):
        try:
            if cfg.augmentation_mode == "natural_temporal" and cfg.T < 2:
                warnings.warn("natural_temporal with T=1 has no temporal variation to learn from", stacklevel=2)
            scenes = load_scene_dataset(cfg.pretrain_data, cfg.T)
            pcfg = replace(cfg.pretrain, crop_spec=cfg.crop_spec())
            last = run_dir / "checkpoints" / "last.ckpt"
            result = pretrain_subset(scenes, cfg.subset_fraction, pcfg, out_dir=run_dir,
                                     resume_from=last if last.exists() else None)
            spec = result.config.crop_spec
            export_backbone(result.pair, backbone_path,
                            {"mean": spec.mean, "std": spec.std, "init_name": cfg.init_name, "run": label})
            manifest.data["pretrain_resolved"] = result.config.to_dict()
            manifest.mark("pretrain")
        except Exception as exc:
            manifest.data["failures"].append({"stage": "pretrain", "error": repr(exc),
                                              "traceback": traceback.format_exc()})
            manifest.data["status"] = "failed"
            manifest.save()
            return False

    report_path = run_dir / "eval_report.jsonl"
    for root in cfg.datasets:
        name = Path(root).name
        for mode in cfg.modes:
            stage = f"eval/{name}/{mode}"
            if manifest.done(stage):
                continue
            try:
                if cfg.pretrain is None:
                    backbone = random_backbone(cfg.init_arch, cfg.eval.seed)
                    norm = {}
                else:
                    backbone, meta = load_backbone(backbone_path)
                    norm = {"mean": tuple(meta["mean"]), "std": tuple(meta["std"])}
                ecfg = replace(cfg.eval, mode=mode, **norm)
                with _deterministic(True):
                    report = evaluate(backbone, load_labeled_dataset(root), ecfg,
                                      init_name=cfg.init_name, dataset_name=name, label=label)
                write_reports(report_path, [report])
                manifest.mark(stage)
            except Exception as exc:
                ok = False
                manifest.data["failures"].append({"stage": stage, "error": repr(exc),
                                                  "traceback": traceback.format_exc()})
                manifest.mark(stage, "failed")
    manifest.data["status"] = "complete" if ok else "failed"
    manifest.save()
    return ok


def run_experiment(cfg_path: str | Path, overrides: dict[str, Any] | None = None) -> int:
    """Run every variant of an experiment config, then plot. Returns a process exit code."""
    cfg = load_experiment(cfg_path, overrides)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [(v.name, variant_config(cfg, v, str(cfg_path))) for v in cfg.variants] or [(cfg.name, cfg)]

    ok = True
    for label, run_cfg in runs:
        run_dir = out / label if cfg.variants else out
        log.info("run %s -> %s", label, run_dir)
        ok = run_single(run_cfg, run_dir, label) and ok

    report_paths = [p for label, _ in runs
                    if (p := (out / label if cfg.variants else out) / "eval_report.jsonl").exists()]
    if report_paths:
        try:
            emit_plots(report_paths, out / "figures")
        except ValueError as exc:
            log.error("plotting failed: %s", exc)
            ok = False
    summary = {"name": cfg.name, "runs": [label for label, _ in runs], "status": "complete" if ok else "failed",
               "reports": [str(p) for p in report_paths]}
    if cfg.variants:
        (out / "experiment.json").write_text(json.dumps(summary, indent=2))
    return 0 if ok else 1

