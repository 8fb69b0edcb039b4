"""Temporal scene stacks and labeled class-folder datasets.

Scenes on disk follow ``root/<scene_id>/<view>.<ext>``; each scene holds the
same number ``T`` of co-registered captures of one geolocation. Labeled
datasets follow ``root/<class_name>/<image>.<ext>``. Pixels are decoded to
float32 ``H x W x C`` arrays in ``[0, 1]``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff")
MANIFEST_NAME = "manifest.json"
MIN_SIDE = 96

# A view is either a path decoded on demand or an in-memory uint8 array.
ViewSource = Union[Path, np.ndarray]


class DatasetLayoutError(ValueError):
    """Raised when a directory tree does not match the expected layout."""


def decode_image(path: Path) -> np.ndarray:
    """Decode an image file to a float32 H x W x 3 array in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DatasetLayoutError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def _to_float(src: ViewSource) -> np.ndarray:
    if isinstance(src, np.ndarray):
        if src.dtype == np.uint8:
            return src.astype(np.float32) / 255.0
        return np.asarray(src, dtype=np.float32)
    return decode_image(src)


@dataclass
class TemporalScene:
    """One geolocation observed at ``T`` points in time."""

    scene_id: str
    sources: tuple[ViewSource, ...]
    geotag: tuple[float, float] | None = None

    @property
    def T(self) -> int:
        return len(self.sources)

    def view(self, t: int) -> np.ndarray:
        return _to_float(self.sources[t])

    @property
    def views(self) -> list[np.ndarray]:
        return [self.view(t) for t in range(self.T)]


@dataclass
class SceneDataset:
    scenes: list[TemporalScene]
    T: int
    root_path: Path | None = None
    labels: dict[str, str] | None = None  # scene_id -> class_name, when known

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, i: int) -> TemporalScene:
        return self.scenes[i]

    def __iter__(self) -> Iterator[TemporalScene]:
        return iter(self.scenes)

    @property
    def scene_ids(self) -> list[str]:
        return [s.scene_id for s in self.scenes]

    def subset(self, indices: Sequence[int]) -> "SceneDataset":
        scenes = [self.scenes[i] for i in indices]
        labels = None
        if self.labels is not None:
            labels = {s.scene_id: self.labels[s.scene_id] for s in scenes}
        return SceneDataset(scenes, self.T, self.root_path, labels)


def _image_files(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def load_scene_dataset(root: str | Path, T: int) -> SceneDataset:
    """Index a scene-per-folder tree. Images are decoded lazily.

    Scenes are ordered by ``scene_id`` and views by filename, so the result
    does not depend on filesystem enumeration order. A ``manifest.json`` at
    the root, if present, supplies per-scene class names.
    """
    root = Path(root)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not root.is_dir():
        raise DatasetLayoutError(f"scene root {root} is not a directory")

    scenes, problems = [], []
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = _image_files(scene_dir)
        if len(files) != T:
            problems.append(f"{scene_dir.name}: expected {T} view files, found {len(files)}")
            continue
        scenes.append(TemporalScene(scene_dir.name, tuple(files)))
    if problems:
        raise DatasetLayoutError("invalid scenes:\n  " + "\n  ".join(problems))
    if not scenes:
        raise DatasetLayoutError(f"no scene directories under {root}")

    labels = None
    manifest = root / MANIFEST_NAME
    if manifest.exists():
        labels = json.loads(manifest.read_text())
    return SceneDataset(scenes, T, root, labels)


def write_scene_dataset(dataset: SceneDataset, root: str | Path) -> Path:
    """Write scenes as PNG views plus the class manifest (if labeled)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    # zero-padded so lexicographic order is temporal order
    width = len(str(dataset.T - 1))
    for scene in dataset:
        scene_dir = root / scene.scene_id
        scene_dir.mkdir(exist_ok=True)
        for t in range(scene.T):
            _save_png(scene.view(t), scene_dir / f"view_{t:0{width}d}.png")
    if dataset.labels is not None:
        (root / MANIFEST_NAME).write_text(json.dumps(dataset.labels, indent=1, sort_keys=True))
    return root


def _save_png(pixels: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


# --------------------------------------------------------------------------
# Synthetic temporal scenes
# --------------------------------------------------------------------------

def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _rotate_hue(img: np.ndarray, angle: float) -> np.ndarray:
    # rotation about the grey axis in RGB space
    c, s = np.cos(angle), np.sin(angle)
    k = 1.0 / 3.0
    sq = np.sqrt(k)
    m = np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])
    return img @ m.T


def _pattern(cls: int, n_classes: int, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Class-dependent texture in [0, 1]; the family cycles with ``cls % 4``."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    family = cls % 4
    # classes beyond the first four reuse a family at a distinct orientation
    base_angle = np.pi * (cls // 4) / max(1, (n_classes + 3) // 4) / 2
    theta = base_angle + rng.uniform(-0.15, 0.15)
    period = rng.uniform(10.0, 18.0)
    phase = rng.uniform(0, 2 * np.pi)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    if family == 0:  # parallel stripes (crop rows, roads)
        p = 0.5 + 0.5 * np.sin(2 * np.pi * u / period + phase)
    elif family == 1:  # block grid (built-up)
        p = ((np.sin(2 * np.pi * u / period + phase) > 0) ^ (np.sin(2 * np.pi * v / period) > 0))
        p = p.astype(np.float64)
    elif family == 2:  # blobs (vegetation)
        noise = rng.standard_normal((H, W))
        p = ndimage.gaussian_filter(noise, sigma=period / 4, mode="wrap")
        p = (p > 0).astype(np.float64)
        p = ndimage.gaussian_filter(p, sigma=1.0)
    else:  # rings around an off-centre point (irrigation circles, ripples)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = np.hypot(yy - cy, xx - cx)
        p = 0.5 + 0.5 * np.sin(2 * np.pi * r / period + phase)
    return p


def _render_scene(cls: int, n_classes: int, T: int, H: int, W: int, rng: np.random.Generator) -> list[np.ndarray]:
    p = _pattern(cls, n_classes, rng, H, W)[..., None]
    # scene palette is random, so colour carries no class information
    col_a = _hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.7), rng.uniform(0.25, 0.5))
    col_b = _hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.7), rng.uniform(0.55, 0.9))
    base = col_a * (1 - p) + col_b * p

    season_phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.1, 0.35)
    hue0 = rng.uniform(-np.pi, np.pi)
    views = []
    for t in range(T):
        # smooth seasonal drift: brightness and hue follow a yearly cycle
        season = np.sin(2 * np.pi * t / max(T, 1) + season_phase)
        img = _rotate_hue(base, hue0 + 0.8 * season + rng.normal(0, 0.15))
        img = img * (1.0 + amp * season)
        # small localized change (construction, cloud, flooding)
        h, w = int(rng.integers(H // 10, H // 4)), int(rng.integers(W // 10, W // 4))
        y, x = int(rng.integers(0, H - h)), int(rng.integers(0, W - w))
        img[y:y + h, x:x + w] = 0.5 * img[y:y + h, x:x + w] + 0.5 * rng.uniform(0, 1, 3)
        img = img + rng.normal(0, 0.02, img.shape)
        views.append(np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8))
    return views


def class_names_for(n_classes: int) -> list[str]:
    return [f"class_{c:02d}" for c in range(n_classes)]


def generate_synthetic_dataset(
    n_scenes: int,
    T: int,
    n_classes: int,
    size: tuple[int, int] = (128, 128),
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> SceneDataset:
    """Procedural stand-in for a seasonal satellite corpus.

    Every scene gets a latent class rendered as a texture family; its ``T``
    views differ by seasonal brightness/hue drift, a localized patch change
    and sensor noise. Classes are assigned round-robin, so they are balanced.
    Pixels are quantized to 8 bits, which makes the PNG round trip exact.
    The output is a pure function of the arguments.
    """
    H, W = size
    if n_scenes < 1 or T < 1 or n_classes < 1:
        raise ValueError("n_scenes, T and n_classes must all be >= 1")
    if H < MIN_SIDE or W < MIN_SIDE:
        raise ValueError(f"size {size} below the {MIN_SIDE}px minimum")

    names = class_names_for(n_classes)
    width = len(str(n_scenes - 1))
    scenes, labels = [], {}
    for i in range(n_scenes):
        cls = i % n_classes
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        sid = f"scene_{i:0{width}d}"
        scenes.append(TemporalScene(sid, tuple(_render_scene(cls, n_classes, T, H, W, rng))))
        labels[sid] = names[cls]
    dataset = SceneDataset(scenes, T, None, labels)
    if out_dir is not None:
        dataset.root_path = write_scene_dataset(dataset, out_dir)
    return dataset


def channel_stats(dataset: SceneDataset, max_scenes: int = 64) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std over (up to) the first ``max_scenes`` scenes."""
    total = None
    sq = None
    count = 0
    for scene in dataset.scenes[:max_scenes]:
        for t in range(scene.T):
            px = scene.view(t).reshape(-1, 3).astype(np.float64)
            total = px.sum(0) if total is None else total + px.sum(0)
            sq = (px ** 2).sum(0) if sq is None else sq + (px ** 2).sum(0)
            count += px.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean ** 2, 1e-12))
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


# --------------------------------------------------------------------------
# Labeled (class-per-folder) datasets
# --------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """``(image, class_index)`` records; class index follows sorted folder names."""

    sources: list[ViewSource]
    targets: list[int]
    class_names: list[str]
    ids: list[str] = field(default_factory=list)
    root_path: Path | None = None

    def __post_init__(self) -> None:
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.sources))]

    def __len__(self) -> int:
        return len(self.sources)

    def image(self, i: int) -> np.ndarray:
        return _to_float(self.sources[i])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset(
            [self.sources[i] for i in indices],
            [self.targets[i] for i in indices],
            list(self.class_names),
            [self.ids[i] for i in indices],
            self.root_path,
        )

    def class_counts(self) -> list[int]:
        return np.bincount(np.asarray(self.targets, dtype=int), minlength=self.n_classes).tolist()


def load_labeled_dataset(root: str | Path) -> LabeledDataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetLayoutError(f"labeled root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetLayoutError(f"no class folders under {root}")
    sources, targets, ids = [], [], []
    for idx, cdir in enumerate(class_dirs):
        files = _image_files(cdir)
        if not files:
            warnings.warn(f"class folder {cdir.name!r} is empty", stacklevel=2)
        for f in files:
            sources.append(f)
            targets.append(idx)
            ids.append(f"{cdir.name}/{f.name}")
    return LabeledDataset(sources, targets, [c.name for c in class_dirs], ids, root)


def labeled_from_scenes(dataset: SceneDataset, view: int = 0) -> LabeledDataset:
    """In-memory labeled dataset from one view per scene, classes from the manifest labels."""
    if dataset.labels is None:
        raise ValueError("dataset carries no class labels")
    names = sorted(set(dataset.labels.values()))
    index = {n: i for i, n in enumerate(names)}
    return LabeledDataset(
        [s.sources[view] for s in dataset],
        [index[dataset.labels[s.scene_id]] for s in dataset],
        names,
        [s.scene_id for s in dataset],
    )


def write_labeled_dataset(dataset: SceneDataset, root: str | Path, view: int = 0) -> Path:
    """Export one view per scene into a class-per-folder tree using the manifest labels."""
    if dataset.labels is None:
        raise ValueError("dataset carries no class labels")
    root = Path(root)
    for scene in dataset:
        cdir = root / dataset.labels[scene.scene_id]
        cdir.mkdir(parents=True, exist_ok=True)
        _save_png(scene.view(view), cdir / f"{scene.scene_id}.png")
    return root
