"""Supervised transfer evaluation: linear probing and fine-tuning over label fractions."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn as nn

from .scene_store import LabeledDataset
from .view_sampler import crop_and_resize

InitName = Literal["random", "s3tss", "dino_artificial", "external_checkpoint"]

_CACHE_LIMIT = 1 << 28  # floats held in memory before falling back to on-the-fly decoding


@dataclass(frozen=True)
class StepSchedule:
    name: Literal["step"] = "step"
    step_size: int = 7
    gamma: float = 0.1

    def __post_init__(self) -> None:
        if self.step_size < 1 or not 0 < self.gamma <= 1:
            raise ValueError("step schedule needs step_size >= 1 and gamma in (0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    mode: Literal["linear_probe", "fine_tune"] = "linear_probe"
    optimizer: Literal["adam", "adamw"] = "adam"
    lr: float = 0.001
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 64
    lr_schedule: StepSchedule = field(default_factory=StepSchedule)
    label_fractions: tuple[float, ...] = (0.01, 0.1, 0.5, 1.0)
    split: tuple[float, float] = (0.8, 0.2)
    seed: int = 0
    resolution: int = 224
    # per-channel normalization; None means statistics of the training split
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        fr = list(self.label_fractions)
        if not fr or fr != sorted(fr) or any(not 0 < f <= 1 for f in fr):
            raise ValueError(f"label_fractions must be ascending values in (0, 1], got {fr}")
        train, test = self.split
        if train <= 0 or test <= 0 or abs(train + test - 1.0) > 1e-9:
            raise ValueError(f"split must be two positive fractions summing to 1, got {self.split}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


@dataclass
class EvalRecord:
    fraction: float
    top1_accuracy: float
    n_train_used: int
    seed: int


@dataclass
class EvalReport:
    dataset_name: str
    init_name: str
    mode: str
    records: list[EvalRecord] = field(default_factory=list)
    label: str = ""  # curve name in plots; defaults to init_name
    protocol: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.label:
            self.label = self.init_name

    @property
    def fractions(self) -> list[float]:
        return [r.fraction for r in self.records]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["records"] = [EvalRecord(**r) for r in d.get("records", [])]
        return cls(**d)


def write_reports(path: str | Path, reports: Sequence[EvalReport], append: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict()) + "\n")
    return path


def read_reports(path: str | Path) -> list[EvalReport]:
    with Path(path).open() as fh:
        return [EvalReport.from_dict(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

def _by_class(targets: Sequence[int]) -> dict[int, np.ndarray]:
    t = np.asarray(targets, dtype=int)
    return {c: np.flatnonzero(t == c) for c in np.unique(t)}


def stratified_split(targets: Sequence[int], test_frac: float, seed: int) -> tuple[list[int], list[int]]:
    """Per-class shuffled train/test split; classes with >= 2 items land in both sides."""
    train, test = [], []
    for c, idx in _by_class(targets).items():
        perm = np.random.default_rng([seed, int(c)]).permutation(idx)
        n = len(perm)
        n_test = int(round(test_frac * n))
        if n >= 2:
            n_test = min(max(n_test, 1), n - 1)
        test.extend(perm[:n_test].tolist())
        train.extend(perm[n_test:].tolist())
    return sorted(train), sorted(test)


def _stratified_take(targets: Sequence[int], fraction: float, seed: int) -> list[int]:
    keep = []
    for c, idx in _by_class(targets).items():
        # a fixed per-class order makes smaller fractions prefixes of larger ones
        perm = np.random.default_rng([seed, int(c), 1]).permutation(idx)
        k = max(1, int(math.floor(fraction * len(perm) + 1e-9)))
        keep.extend(perm[:k].tolist())
    return sorted(keep)


def subsample_labels(dataset: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Class-stratified subset of ``floor(fraction * n_c)`` items per class (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return dataset.subset(_stratified_take(dataset.targets, fraction, seed))


def top1_accuracy(logits: torch.Tensor, targets: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == targets).double().mean())


# --------------------------------------------------------------------------
# Image tensors
# --------------------------------------------------------------------------

class ImageTensors:
    """Resized, normalized images; cached in memory when they fit."""

    def __init__(self, dataset: LabeledDataset, resolution: int, mean=None, std=None):
        self.dataset = dataset
        self.resolution = resolution
        self.mean = mean
        self.std = std
        self._cache: torch.Tensor | None = None
        if len(dataset) * 3 * resolution * resolution <= _CACHE_LIMIT:
            self._cache = self._load(range(len(dataset)), normalize=False)

    def _load(self, indices, normalize: bool = True) -> torch.Tensor:
        out = []
        for i in indices:
            img = torch.from_numpy(self.dataset.image(i)).permute(2, 0, 1).contiguous()
            out.append(crop_and_resize(img, (0, 0, img.shape[2], img.shape[1]), self.resolution))
        x = torch.stack(out)
        return self._normalize(x) if normalize else x

    def _normalize(self, x: torch.Tensor) -> torch.Tensor:
        if self.mean is None:
            return x
        m = torch.tensor(self.mean, dtype=x.dtype)[:, None, None]
        s = torch.tensor(self.std, dtype=x.dtype)[:, None, None]
        return (x - m) / s

    def fit_normalization(self, indices: Sequence[int]) -> None:
        n, total, sq = 0, torch.zeros(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)
        for start in range(0, len(indices), 256):
            x = self.raw(indices[start:start + 256]).double()
            total += x.sum(dim=(0, 2, 3))
            sq += (x ** 2).sum(dim=(0, 2, 3))
            n += x.shape[0] * x.shape[2] * x.shape[3]
        mean = total / n
        std = torch.sqrt(torch.clamp(sq / n - mean ** 2, min=1e-12))
        self.mean, self.std = tuple(mean.tolist()), tuple(std.tolist())

    def raw(self, indices: Sequence[int]) -> torch.Tensor:
        if self._cache is not None:
            return self._cache[list(indices)]
        return self._load(indices, normalize=False)

    def batch(self, indices: Sequence[int]) -> torch.Tensor:
        return self._normalize(self.raw(indices))


# --------------------------------------------------------------------------
# Training helpers
# --------------------------------------------------------------------------

def _optimizer(params, cfg: EvalConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
    return cls(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _scheduler(opt, cfg: EvalConfig):
    return torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_schedule.step_size, gamma=cfg.lr_schedule.gamma)


def _fit(model: nn.Module, params, fetch, targets: torch.Tensor, cfg: EvalConfig, seed: int) -> nn.Module:
    """Minibatch training loop shared by probing and fine-tuning.

    ``fetch(positions)`` returns inputs for rows of ``targets``.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = _optimizer(params, cfg)
    sched = _scheduler(opt, cfg)
    loss_fn = nn.CrossEntropyLoss()
    n = targets.shape[0]
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            pos = perm[start:start + cfg.batch_size]
            loss = loss_fn(model(fetch(pos)), targets[pos])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
    return model


@torch.no_grad()
def extract_features(backbone: nn.Module, images: ImageTensors, indices: Sequence[int], chunk: int = 256) -> torch.Tensor:
    was_training = backbone.training
    backbone.eval()
    try:
        feats = [backbone(images.batch(indices[s:s + chunk])) for s in range(0, len(indices), chunk)]
    finally:
        backbone.train(was_training)
    return torch.cat(feats)


def _check_classes(dataset: LabeledDataset, train_idx: Sequence[int], fraction: float) -> None:
    present = set(dataset.targets[i] for i in train_idx)
    missing = [dataset.class_names[c] for c in range(dataset.n_classes) if c not in present]
    if missing:
        raise ValueError(
            f"classes {missing} have no training samples at fraction {fraction}; use a larger fraction"
        )


def _prepare(dataset: LabeledDataset, cfg: EvalConfig):
    if dataset.n_classes < 2:
        raise ValueError("downstream evaluation needs at least two classes")
    train_idx, test_idx = stratified_split(dataset.targets, cfg.split[1], cfg.seed)
    images = ImageTensors(dataset, cfg.resolution, cfg.mean, cfg.std)
    if cfg.mean is None:
        images.fit_normalization(train_idx)
    targets = torch.as_tensor(dataset.targets, dtype=torch.long)
    return train_idx, test_idx, images, targets


def _fraction_indices(dataset: LabeledDataset, train_idx: list[int], fraction: float, seed: int) -> list[int]:
    local = _stratified_take([dataset.targets[i] for i in train_idx], fraction, seed)
    chosen = [train_idx[j] for j in local]
    _check_classes(dataset, chosen, fraction)
    return chosen


def _protocol(cfg: EvalConfig) -> dict:
    return asdict(cfg)


# --------------------------------------------------------------------------
# Public evaluation entry points
# --------------------------------------------------------------------------

def linear_probe(
    backbone: nn.Module,
    dataset: LabeledDataset,
    cfg: EvalConfig,
    init_name: str = "external_checkpoint",
    dataset_name: str = "",
    label: str = "",
) -> EvalReport:
    """Train a linear classifier on frozen backbone features for each label fraction.

    The backbone runs in eval mode under ``no_grad``; neither its parameters
    nor its normalization statistics change.
    """
    train_idx, test_idx, images, targets = _prepare(dataset, cfg)
    feats = extract_features(backbone, images, train_idx + test_idx)
    pos = {i: k for k, i in enumerate(train_idx + test_idx)}
    test_x = feats[[pos[i] for i in test_idx]]
    test_y = targets[test_idx]

    report = EvalReport(dataset_name or _name_of(dataset), init_name, "linear_probe", label=label, protocol=_protocol(cfg))
    for k, fraction in enumerate(cfg.label_fractions):
        chosen = _fraction_indices(dataset, train_idx, fraction, cfg.seed)
        x = feats[[pos[i] for i in chosen]]
        y = targets[chosen]
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed * 1000 + k)
            clf = nn.Linear(x.shape[1], dataset.n_classes)
        _fit(clf, clf.parameters(), lambda p: x[p], y, cfg, seed=cfg.seed * 1000 + k)
        with torch.no_grad():
            acc = top1_accuracy(clf(test_x), test_y)
        report.records.append(EvalRecord(fraction, acc, len(chosen), cfg.seed))
    return report


def train_fine_tuned(backbone: nn.Module, feature_dim: int, images: ImageTensors, train_idx: Sequence[int],
                     targets: torch.Tensor, n_classes: int, cfg: EvalConfig, seed: int) -> nn.Sequential:
    """Copy of ``backbone`` plus a new linear layer, all parameters trained."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = nn.Sequential(copy.deepcopy(backbone), nn.Linear(feature_dim, n_classes))
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    train_idx = list(train_idx)
    y = targets[train_idx]
    _fit(model, model.parameters(), lambda p: images.batch([train_idx[i] for i in p.tolist()]), y, cfg, seed)
    return model.eval()


def fine_tune(
    backbone: nn.Module,
    dataset: LabeledDataset,
    cfg: EvalConfig,
    init_name: str = "external_checkpoint",
    dataset_name: str = "",
    label: str = "",
) -> EvalReport:
    """Fine-tune a copy of the backbone with a new linear head for each label fraction."""
    train_idx, test_idx, images, targets = _prepare(dataset, cfg)
    feature_dim = extract_features(backbone, images, train_idx[:1]).shape[1]
    test_y = targets[test_idx]
    report = EvalReport(dataset_name or _name_of(dataset), init_name, "fine_tune", label=label, protocol=_protocol(cfg))
    for k, fraction in enumerate(cfg.label_fractions):
        chosen = _fraction_indices(dataset, train_idx, fraction, cfg.seed)
        model = train_fine_tuned(backbone, feature_dim, images, chosen, targets, dataset.n_classes, cfg,
                                 seed=cfg.seed * 1000 + k)
        with torch.no_grad():
            logits = torch.cat([model(images.batch(test_idx[s:s + 256])) for s in range(0, len(test_idx), 256)])
        report.records.append(EvalRecord(fraction, top1_accuracy(logits, test_y), len(chosen), cfg.seed))
    return report


def evaluate(backbone: nn.Module, dataset: LabeledDataset, cfg: EvalConfig, **kwargs) -> EvalReport:
    fn = linear_probe if cfg.mode == "linear_probe" else fine_tune
    return fn(backbone, dataset, cfg, **kwargs)


def _name_of(dataset: LabeledDataset) -> str:
    return dataset.root_path.name if dataset.root_path is not None else "dataset"
