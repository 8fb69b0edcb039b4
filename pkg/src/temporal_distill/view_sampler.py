"""Temporal multi-crop sampling.

Global and local crops are drawn across the ``T`` captures of one scene, so
the differences between views come from time rather than from hand-made
photometric transforms. The DINO-style artificial pipeline is kept behind
``artificial_aug`` for the comparison arm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .scene_store import TemporalScene

Allocation = Literal["stratified", "uniform_random", "single_view"]
Rect = tuple[int, int, int, int]  # x, y, w, h

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class CropSpec:
    n_global: int = 10
    n_local: int = 30
    global_size: int = 224
    local_size: int = 96
    global_area_range: tuple[float, float] = (0.4, 1.0)
    local_area_range: tuple[float, float] = (0.05, 0.4)
    allocation: Allocation = "stratified"
    artificial_aug: bool = False
    # per-channel normalization; None leaves pixels in [0, 1]
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.n_global < 1:
            raise ValueError("n_global must be >= 1: the teacher needs a view")
        if self.n_local < 0:
            raise ValueError("n_local must be >= 0")
        if self.global_size < 1 or self.local_size < 1:
            raise ValueError("crop sizes must be positive")
        for name in ("global_area_range", "local_area_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if self.local_area_range[1] > 0.5:
            raise ValueError("local crops must cover at most half the source area")
        if self.allocation not in ("stratified", "uniform_random", "single_view"):
            raise ValueError(f"unknown allocation {self.allocation!r}")
        if (self.mean is None) != (self.std is None):
            raise ValueError("mean and std must be given together")
        if self.std is not None and any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")

    @property
    def n_crops(self) -> int:
        return self.n_global + self.n_local


@dataclass
class Crop:
    pixels: torch.Tensor  # C x size x size
    kind: Literal["global", "local"]
    source_view: int
    rect: Rect


@dataclass
class ViewBatch:
    """Crops of one scene; global crops come first, in view order."""

    crops: list[Crop] = field(default_factory=list)
    scene_id: str = ""

    def __len__(self) -> int:
        return len(self.crops)

    @property
    def global_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.crops) if c.kind == "global"]

    def of_kind(self, kind: str) -> list[Crop]:
        return [c for c in self.crops if c.kind == kind]


class CropSizeError(ValueError):
    pass


def crop_and_resize(image, rect: Rect, out_size: int):
    """Bilinear resize of ``rect`` to ``out_size x out_size``.

    Accepts an ``H x W x C`` numpy array (returns the same layout) or a
    ``C x H x W`` tensor. Sampling uses half-pixel centres without
    antialiasing, so each output pixel is a convex combination of at most
    four source pixels.
    """
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    as_numpy = isinstance(image, np.ndarray)
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1) if as_numpy else image
    _, H, W = t.shape
    x, y, w, h = rect
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"rect {rect} outside image bounds {W}x{H}")
    patch = t[:, y:y + h, x:x + w]
    if h == out_size and w == out_size:
        out = patch.clone()
    else:
        out = F.interpolate(patch[None], size=(out_size, out_size), mode="bilinear",
                            align_corners=False, antialias=False)[0]
    if as_numpy:
        return out.permute(1, 2, 0).numpy()
    return out


def sample_rect(H: int, W: int, area_range: tuple[float, float], rng: np.random.Generator) -> Rect:
    """Random rectangle with area fraction uniform in ``area_range`` and aspect ratio uniform in [3/4, 4/3]."""
    area = H * W
    for _ in range(10):
        target = area * rng.uniform(*area_range)
        ratio = rng.uniform(*ASPECT_RANGE)
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= W and 0 < h <= H:
            x = int(rng.integers(0, W - w + 1))
            y = int(rng.integers(0, H - h + 1))
            return x, y, w, h
    # fallback: centred crop at the largest admissible area
    side_area = area * area_range[1]
    w = min(W, max(1, int(round(math.sqrt(side_area)))))
    h = min(H, max(1, int(round(side_area / w))))
    return (W - w) // 2, (H - h) // 2, w, h


def allocate_views(n: int, T: int, allocation: str, rng: np.random.Generator, single: int = 0) -> list[int]:
    """Source-view index for each of ``n`` crops."""
    if allocation == "stratified":
        base, rem = divmod(n, T)
        # remainder crops go to the earliest views
        return [t for t in range(T) for _ in range(base + (1 if t < rem else 0))]
    if allocation == "uniform_random":
        return [int(v) for v in rng.integers(0, T, size=n)]
    return [single] * n


def _artificial(crop: torch.Tensor, kind: str, index: int, rng: np.random.Generator) -> torch.Tensor:
    """DINO-style flip, colour jitter, grayscale and blur with explicit random draws."""
    if rng.uniform() < 0.5:
        crop = TF.hflip(crop)
    if rng.uniform() < 0.8:
        crop = TF.adjust_brightness(crop, rng.uniform(0.6, 1.4))
        crop = TF.adjust_contrast(crop, rng.uniform(0.6, 1.4))
        crop = TF.adjust_saturation(crop, rng.uniform(0.8, 1.2))
        crop = TF.adjust_hue(crop, rng.uniform(-0.1, 0.1))
    if rng.uniform() < 0.2:
        crop = TF.rgb_to_grayscale(crop, num_output_channels=crop.shape[0])
    # first global view always blurred, second rarely, locals half the time
    p_blur = 0.5 if kind == "local" else (1.0 if index == 0 else 0.1)
    if rng.uniform() < p_blur:
        size = crop.shape[-1]
        k = max(3, (size // 10) | 1)
        crop = TF.gaussian_blur(crop, [k, k], [float(rng.uniform(0.1, 2.0))] * 2)
    return crop.clamp(0.0, 1.0)


def sample_views(scene: TemporalScene, spec: CropSpec, rng_seed: int) -> ViewBatch:
    """Draw ``spec.n_global`` global and ``spec.n_local`` local crops from the scene's views.

    Deterministic in ``rng_seed``. Without ``artificial_aug`` the only pixel
    operations are crop, bilinear resize and normalization.
    """
    rng = np.random.default_rng(rng_seed)
    T = scene.T
    views = [torch.from_numpy(v).permute(2, 0, 1).contiguous() for v in scene.views]
    for t, v in enumerate(views):
        if min(v.shape[1:]) < spec.local_size:
            raise CropSizeError(
                f"scene {scene.scene_id!r} view {t} is {v.shape[2]}x{v.shape[1]}, "
                f"smaller than the {spec.local_size}px local crop"
            )
    single = int(rng.integers(0, T))
    plan = [("global", v) for v in allocate_views(spec.n_global, T, spec.allocation, rng, single)]
    plan += [("local", v) for v in allocate_views(spec.n_local, T, spec.allocation, rng, single)]

    if spec.mean is not None:
        mean = torch.tensor(spec.mean, dtype=torch.float32)[:, None, None]
        std = torch.tensor(spec.std, dtype=torch.float32)[:, None, None]

    crops = []
    for i, (kind, t) in enumerate(plan):
        src = views[t]
        area_range = spec.global_area_range if kind == "global" else spec.local_area_range
        size = spec.global_size if kind == "global" else spec.local_size
        rect = sample_rect(src.shape[1], src.shape[2], area_range, rng)
        px = crop_and_resize(src, rect, size)
        if spec.artificial_aug:
            px = _artificial(px, kind, i, rng)
        if spec.mean is not None:
            px = (px - mean) / std
        crops.append(Crop(px, kind, t, rect))
    return ViewBatch(crops, scene.scene_id)

