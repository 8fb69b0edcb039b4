"""Backbone + projection head, the student/teacher pair, and backbone export."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .view_sampler import ViewBatch

BACKBONE_FORMAT = "temporal-distill-backbone/1"

FEATURE_DIMS = {"resnet18": 512, "tiny_cnn": 64}


@dataclass(frozen=True)
class BackboneConfig:
    arch: Literal["resnet18", "tiny_cnn"] = "resnet18"
    feature_dim: int = 512

    def __post_init__(self) -> None:
        if self.arch not in FEATURE_DIMS:
            raise ValueError(f"unknown backbone {self.arch!r}")
        if self.feature_dim != FEATURE_DIMS[self.arch]:
            raise ValueError(
                f"{self.arch} produces {FEATURE_DIMS[self.arch]}-dim features, "
                f"config says {self.feature_dim}"
            )

    @classmethod
    def for_arch(cls, arch: str) -> "BackboneConfig":
        return cls(arch, FEATURE_DIMS[arch])


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 512
    hidden_dims: tuple[int, int] = (512, 64)
    out_dim: int = 2048
    dino_head_compat: bool = False

    @property
    def layer_dims(self) -> list[int]:
        return [self.in_dim, *self.hidden_dims, self.out_dim]


class TinyCNN(nn.Module):
    """Four stride-2 conv blocks and global average pooling; desk-scale stand-in for ResNet-18."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 64)):
        super().__init__()
        layers, c_in = [], 3
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(c), nn.ReLU(inplace=True)]
            c_in = c
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = c_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.features(x)), 1)


def make_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.arch == "tiny_cnn":
        return TinyCNN()
    net = torchvision.models.resnet18(weights=None)
    net.fc = nn.Identity()
    return net


class ProjectionHead(nn.Module):
    """Three linear layers with GELU between them.

    With ``dino_head_compat`` the bottleneck is L2-normalized and the last
    layer is weight-normalized without bias, as in DINO.
    """

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        d_in, h1, h2 = cfg.in_dim, *cfg.hidden_dims
        self.compat = cfg.dino_head_compat
        self.mlp = nn.Sequential(nn.Linear(d_in, h1), nn.GELU(), nn.Linear(h1, h2))
        if self.compat:
            self.last = nn.utils.parametrizations.weight_norm(nn.Linear(h2, cfg.out_dim, bias=False))
        else:
            self.act = nn.GELU()
            self.last = nn.Linear(h2, cfg.out_dim)
            # variance-preserving init: the default init shrinks the logit
            # spread far below the teacher temperature and training stalls
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.mlp(x)
        z = F.normalize(z, dim=-1) if self.compat else self.act(z)
        return self.last(z)


class Encoder(nn.Module):
    def __init__(self, backbone: nn.Module, head: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


class StudentTeacherPair(nn.Module):
    def __init__(self, student: Encoder, teacher: Encoder, backbone_cfg: BackboneConfig, head_cfg: HeadConfig):
        super().__init__()
        self.student = student
        self.teacher = teacher
        self.backbone_cfg = backbone_cfg
        self.head_cfg = head_cfg

    def train(self, mode: bool = True) -> "StudentTeacherPair":
        self.student.train(mode)
        self.teacher.train(mode)
        self.training = mode
        return self

    def arch_metadata(self) -> dict:
        return {"backbone": asdict(self.backbone_cfg), "head": asdict(self.head_cfg)}


def build_pair(backbone_cfg: BackboneConfig, head_cfg: HeadConfig, init_seed: int = 0) -> StudentTeacherPair:
    if head_cfg.in_dim != backbone_cfg.feature_dim:
        raise ValueError(
            f"head expects {head_cfg.in_dim}-dim input but {backbone_cfg.arch} "
            f"yields {backbone_cfg.feature_dim}-dim features"
        )
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(init_seed)
    try:
        student = Encoder(make_backbone(backbone_cfg), ProjectionHead(head_cfg))
    finally:
        torch.random.set_rng_state(gen_state)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    for m in teacher.modules():
        # normalize with batch statistics during training but never write the
        # running buffers from a forward pass; they change only through EMA
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.track_running_stats = False
    pair = StudentTeacherPair(student, teacher, backbone_cfg, head_cfg)
    pair.train()
    return pair


def forward_multires(net: nn.Module, batch: ViewBatch | Sequence[ViewBatch], kind: str | None = None) -> torch.Tensor:
    """Logits for every crop (optionally only crops of ``kind``).

    Crops of equal spatial size share one forward pass; rows come back in
    input order, scene after scene.
    """
    batches = [batch] if isinstance(batch, ViewBatch) else list(batch)
    crops = [c for b in batches for c in b.crops if kind is None or c.kind == kind]
    if not crops:
        raise ValueError("no crops to forward")
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(crops):
        groups.setdefault(c.pixels.shape[-1], []).append(i)
    outputs: list[torch.Tensor | None] = [None] * len(crops)
    for idx in groups.values():
        out = net(torch.stack([crops[i].pixels for i in idx]))
        for row, i in enumerate(idx):
            outputs[i] = out[row]
    return torch.stack(outputs)  # type: ignore[arg-type]


# --------------------------------------------------------------------------
# Backbone transfer artifact
# --------------------------------------------------------------------------

def export_backbone(pair: StudentTeacherPair, path: str | Path | None = None, extra: dict | None = None) -> dict:
    """Teacher backbone only, keyed under ``backbone.``; the head is dropped."""
    state = {f"backbone.{k}": v.detach().clone() for k, v in pair.teacher.backbone.state_dict().items()}
    artifact = {
        "format": BACKBONE_FORMAT,
        "arch": asdict(pair.backbone_cfg),
        "meta": dict(extra or {}),
        "state": state,
    }
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(artifact, path)
    return artifact


def load_backbone(source: str | Path | dict) -> tuple[nn.Module, dict]:
    """Rebuild a backbone from an exported artifact. Returns ``(module, meta)``."""
    artifact = source if isinstance(source, dict) else torch.load(source, map_location="cpu", weights_only=False)
    if artifact.get("format") != BACKBONE_FORMAT:
        raise ValueError(f"unsupported backbone format {artifact.get('format')!r}, expected {BACKBONE_FORMAT!r}")
    cfg = BackboneConfig(**artifact["arch"])
    net = make_backbone(cfg)
    prefix = "backbone."
    net.load_state_dict({k[len(prefix):]: v for k, v in artifact["state"].items()})
    net.eval()
    return net, dict(artifact.get("meta", {}))


def random_backbone(arch: str, seed: int = 0) -> nn.Module:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = make_backbone(BackboneConfig.for_arch(arch))
    finally:
        torch.random.set_rng_state(gen_state)
    return net.eval()
