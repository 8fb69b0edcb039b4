"""Self-supervised training loop over temporal scenes."""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from .distill import (
    DistillState,
    cosine_momentum,
    ema_update,
    mean_prob_entropy,
    multiview_loss,
    teacher_probs,
    update_center,
)
from .network import BackboneConfig, HeadConfig, StudentTeacherPair, build_pair, forward_multires
from .scene_store import SceneDataset, channel_stats
from .view_sampler import CropSpec, sample_views

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimizerConfig:
    name: Literal["adamw", "adam"] = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.04


@dataclass(frozen=True)
class DistillConfig:
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    ema_momentum: float = 0.996
    ema_schedule: Literal["constant", "cosine"] = "constant"
    # linear teacher-temperature warmup; off unless a start value is given
    warmup_teacher_temp: float | None = None
    warmup_teacher_temp_epochs: int = 0


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    scenes_per_step: int = 8
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    crop_spec: CropSpec = field(default_factory=CropSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    seed: int = 0
    checkpoint_every: int = 1
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.scenes_per_step < 1:
            raise ValueError("scenes_per_step must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    loss: float
    teacher_mean_entropy: float
    ema_momentum: float
    lr: float
    wall_ms: int

    def metrics(self) -> dict:
        """Everything except wall-clock time."""
        d = asdict(self)
        d.pop("wall_ms")
        return d


@dataclass
class EpochSummary:
    epoch: int
    mean_loss: float
    # entropy of the teacher probability row averaged over the whole epoch
    teacher_entropy: float
    min_step_entropy: float
    collapse_alarm: bool = False


@dataclass
class PretrainResult:
    pair: StudentTeacherPair
    records: list[TrainLogRecord]
    epochs: list[EpochSummary]
    state: DistillState
    config: PretrainConfig
    checkpoint: Path | None = None


@dataclass
class Checkpoint:
    pair: StudentTeacherPair
    state: DistillState
    epoch: int  # last completed epoch
    step: int
    optimizer_state: dict
    config: dict
    path: Path | None = None


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, step: int, last_checkpoint: Path | None):
        self.last_checkpoint = last_checkpoint
        super().__init__(
            f"non-finite loss at epoch {epoch} step {step}; "
            f"last good checkpoint: {last_checkpoint or 'none'}"
        )


class CheckpointError(ValueError):
    pass


def scene_seed(global_seed: int, epoch: int, scene_index: int) -> int:
    return int(np.random.SeedSequence([global_seed, epoch, scene_index]).generate_state(1)[0])


def epoch_order(global_seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([global_seed, epoch]).permutation(n)


@contextmanager
def _deterministic(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _make_optimizer(pair: StudentTeacherPair, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for p in pair.student.parameters():
        (no_decay if p.ndim <= 1 else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    if cfg.name == "adamw":
        return torch.optim.AdamW(groups, lr=cfg.lr)
    if cfg.name == "adam":
        return torch.optim.Adam(groups, lr=cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.name!r}")


def _lr_at(cfg: PretrainConfig, step: int, total: int) -> float:
    base = cfg.optimizer.lr
    if cfg.lr_schedule == "constant" or total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _teacher_temp_at(cfg: DistillConfig, epoch: int) -> float:
    if cfg.warmup_teacher_temp is None or epoch > cfg.warmup_teacher_temp_epochs:
        return cfg.teacher_temp
    frac = (epoch - 1) / max(1, cfg.warmup_teacher_temp_epochs)
    return cfg.warmup_teacher_temp + frac * (cfg.teacher_temp - cfg.warmup_teacher_temp)


def resolve_config(dataset: SceneDataset, cfg: PretrainConfig) -> PretrainConfig:
    """Fill dataset-derived defaults (channel normalization)."""
    if cfg.crop_spec.mean is None:
        mean, std = channel_stats(dataset)
        cfg = replace(cfg, crop_spec=replace(cfg.crop_spec, mean=mean, std=std))
    return cfg


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path: Path, pair: StudentTeacherPair, state: DistillState, optimizer: torch.optim.Optimizer,
                    epoch: int, step: int, cfg: PretrainConfig) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": pair.arch_metadata(),
        "student": pair.student.state_dict(),
        "teacher": pair.teacher.state_dict(),
        "optimizer": optimizer.state_dict(),
        "distill": {
            "center": state.center.clone(),
            "center_momentum": state.center_momentum,
            "teacher_temp": state.teacher_temp,
            "student_temp": state.student_temp,
            "ema_momentum": state.ema_momentum,
        },
        "epoch": epoch,
        "step": step,
        "config": cfg.to_dict(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def resume(checkpoint: str | Path) -> Checkpoint:
    """Load a training checkpoint written by :func:`pretrain`."""
    path = Path(checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is incompatible with reader version {CHECKPOINT_VERSION}")
    arch = payload["arch"]
    pair = build_pair(BackboneConfig(**arch["backbone"]), HeadConfig(**{**arch["head"], "hidden_dims": tuple(arch["head"]["hidden_dims"])}))
    pair.student.load_state_dict(payload["student"])
    pair.teacher.load_state_dict(payload["teacher"])
    d = payload["distill"]
    center = d["center"]
    K = pair.head_cfg.out_dim
    if not isinstance(center, torch.Tensor) or center.dim() != 1 or center.shape[0] != K:
        shape = tuple(center.shape) if isinstance(center, torch.Tensor) else type(center).__name__
        raise CheckpointError(f"field 'distill.center' has shape {shape}, expected ({K},)")
    state = DistillState(center, d["center_momentum"], d["teacher_temp"], d["student_temp"], d["ema_momentum"])
    return Checkpoint(pair, state, payload["epoch"], payload["step"], payload["optimizer"], payload["config"], path)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def pretrain(
    dataset: SceneDataset,
    cfg: PretrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> PretrainResult:
    """Train student and teacher on temporal multi-crop batches.

    Per step: crops for ``scenes_per_step`` scenes, student forward on every
    crop, teacher forward on global crops, loss, optimizer step on the
    student, center update, EMA teacher update. When ``out_dir`` is given,
    step records go to ``train_log.jsonl``, epoch summaries to
    ``epoch_log.jsonl`` and checkpoints to ``checkpoints/``.
    ``stop_after_epoch`` ends the run early (with a checkpoint), as if the
    job were interrupted.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cfg = resolve_config(dataset, cfg)
    if cfg.head.in_dim != cfg.backbone.feature_dim:
        raise ValueError("head input dimension does not match backbone features")
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out is not None else None

    with _deterministic(cfg.deterministic):
        if resume_from is not None:
            ck = resume(resume_from)
            pair, state, start_epoch, step = ck.pair, ck.state, ck.epoch + 1, ck.step
            optimizer = _make_optimizer(pair, cfg.optimizer)
            optimizer.load_state_dict(ck.optimizer_state)
            last_ckpt: Path | None = ck.path
            if out is not None:
                # records written after the checkpoint belong to work that is about to be redone
                for name in ("train_log.jsonl", "epoch_log.jsonl"):
                    _truncate_jsonl(out / name, keep_below_epoch=start_epoch)
        else:
            pair = build_pair(cfg.backbone, cfg.head, cfg.seed)
            d = cfg.distill
            state = DistillState.zeros(cfg.head.out_dim, center_momentum=d.center_momentum, teacher_temp=d.teacher_temp,
                                       student_temp=d.student_temp, ema_momentum=d.ema_momentum)
            optimizer = _make_optimizer(pair, cfg.optimizer)
            start_epoch, step, last_ckpt = 1, 0, None
        pair.train()

        n = len(dataset)
        spb = cfg.scenes_per_step
        steps_per_epoch = math.ceil(n / spb)
        total_steps = steps_per_epoch * cfg.epochs
        G = cfg.crop_spec.n_global
        pairing = list(range(G))
        ln_k = math.log(cfg.head.out_dim)
        last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

        records: list[TrainLogRecord] = []
        summaries: list[EpochSummary] = []
        for epoch in range(start_epoch, last_epoch + 1):
            state.teacher_temp = _teacher_temp_at(cfg.distill, epoch)
            order = epoch_order(cfg.seed, epoch, n)
            prob_sum = torch.zeros(cfg.head.out_dim, dtype=torch.float64)
            prob_rows = 0
            epoch_records = []
            for start in range(0, n, spb):
                t0 = time.perf_counter()
                idx = [int(i) for i in order[start:start + spb]]
                batches = [sample_views(dataset[i], cfg.crop_spec, scene_seed(cfg.seed, epoch, i)) for i in idx]
                B = len(batches)

                lr = _lr_at(cfg, step, total_steps)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                if cfg.distill.ema_schedule == "cosine":
                    momentum = cosine_momentum(cfg.distill.ema_momentum, step, total_steps)
                else:
                    momentum = cfg.distill.ema_momentum

                student_out = forward_multires(pair.student, batches)
                with torch.no_grad():
                    teacher_out = forward_multires(pair.teacher, batches, kind="global")
                student_out = student_out.reshape(B, -1, student_out.shape[-1])
                teacher_out = teacher_out.reshape(B, G, -1)
                loss = multiview_loss(teacher_out, student_out, pairing, state)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(epoch, step, last_ckpt)

                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()

                with torch.no_grad():
                    probs = teacher_probs(teacher_out, state)
                    entropy = mean_prob_entropy(probs)
                    prob_sum += probs.reshape(-1, probs.shape[-1]).double().sum(0)
                    prob_rows += probs.shape[0] * probs.shape[1]
                    state.center = update_center(state, teacher_out)
                    ema_update(pair.teacher, pair.student, momentum)

                rec = TrainLogRecord(epoch, step, float(loss.detach()), entropy, momentum, lr,
                                     int((time.perf_counter() - t0) * 1000))
                epoch_records.append(rec)
                step += 1

            p = prob_sum / prob_rows
            epoch_entropy = float(-(p * torch.log(p.clamp_min(1e-30))).sum())
            step_entropies = [r.teacher_mean_entropy for r in epoch_records]
            summary = EpochSummary(
                epoch=epoch,
                mean_loss=float(np.mean([r.loss for r in epoch_records])),
                teacher_entropy=epoch_entropy,
                min_step_entropy=float(min(step_entropies)),
                collapse_alarm=all(e < 0.1 * ln_k for e in step_entropies),
            )
            if summary.collapse_alarm:
                warnings.warn(f"possible collapse in epoch {epoch}: teacher entropy below 0.1 ln K all epoch",
                              RuntimeWarning, stacklevel=2)
            log.info("epoch %d loss %.4f teacher entropy %.3f", epoch, summary.mean_loss, epoch_entropy)
            records.extend(epoch_records)
            summaries.append(summary)

            if out is not None:
                _append_jsonl(out / "train_log.jsonl", [asdict(r) for r in epoch_records])
                _append_jsonl(out / "epoch_log.jsonl", [asdict(summary)])
                if epoch % cfg.checkpoint_every == 0 or epoch == last_epoch:
                    last_ckpt = save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.ckpt", pair, state, optimizer, epoch, step, cfg)
                    save_checkpoint(ckpt_dir / "last.ckpt", pair, state, optimizer, epoch, step, cfg)

    return PretrainResult(pair, records, summaries, state, cfg, last_ckpt)


def subset_indices(n: int, fraction: float, seed: int) -> list[int]:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    k = int(math.floor(fraction * n))
    if k == 0:
        raise ValueError(f"fraction {fraction} of {n} scenes leaves an empty subset")
    if k == n:
        return list(range(n))
    rng = np.random.default_rng([seed, 0x5EC0])
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def pretrain_subset(dataset: SceneDataset, fraction: float, cfg: PretrainConfig, **kwargs) -> PretrainResult:
    """Pretrain on a seeded subset of ``floor(fraction * N)`` scenes."""
    return pretrain(dataset.subset(subset_indices(len(dataset), fraction, cfg.seed)), cfg, **kwargs)


def _append_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _truncate_jsonl(path: Path, keep_below_epoch: int) -> None:
    if path.exists():
        rows = [r for r in read_jsonl(path) if r["epoch"] < keep_below_epoch]
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
