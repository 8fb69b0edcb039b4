import json
import pathlib
import random
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from temporal_distill.scene_store import (
    DatasetLayoutError,
    TemporalScene,
    channel_stats,
    generate_synthetic_dataset,
    labeled_from_scenes,
    load_labeled_dataset,
    load_scene_dataset,
    write_labeled_dataset,
    write_scene_dataset,
)


def _write_png(path, value=0, size=(96, 96)):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((*size, 3), value, dtype=np.uint8)).save(path)


def test_layout_contract(tmp_path):
    names = [f"s{i:03d}" for i in range(100)]
    random.Random(0).shuffle(names)  # creation order differs from lexicographic
    for n in names:
        for t in (3, 0, 4, 1, 2):
            _write_png(tmp_path / n / f"v{t}.png", value=t)
    ds = load_scene_dataset(tmp_path, T=5)
    assert len(ds) == 100 and ds.T == 5
    assert ds.scene_ids == sorted(names)
    assert [p.name for p in ds[0].sources] == [f"v{t}.png" for t in range(5)]
    assert ds[0].view(3)[0, 0, 0] == pytest.approx(3 / 255)


def test_missing_view_names_scene(tmp_path):
    for i in range(3):
        for t in range(5 if i != 1 else 4):
            _write_png(tmp_path / f"scene{i}" / f"{t}.png")
    with pytest.raises(DatasetLayoutError, match="scene1: expected 5 view files, found 4"):
        load_scene_dataset(tmp_path, 5)


def test_all_bad_scenes_are_listed(tmp_path):
    for name, n in (("a", 2), ("b", 3), ("c", 1)):
        for t in range(n):
            _write_png(tmp_path / name / f"{t}.png")
    with pytest.raises(DatasetLayoutError) as exc:
        load_scene_dataset(tmp_path, 3)
    assert "a:" in str(exc.value) and "c:" in str(exc.value) and "b:" not in str(exc.value)


def test_undecodable_image_names_file(tmp_path):
    _write_png(tmp_path / "s" / "0.png")
    (tmp_path / "s" / "1.png").write_bytes(b"not an image")
    ds = load_scene_dataset(tmp_path, 2)  # decoding is lazy
    with pytest.raises(DatasetLayoutError, match="1.png"):
        ds[0].view(1)


def test_synthetic_counts_and_balance(tmp_path):
    ds = generate_synthetic_dataset(500, 5, 4, (128, 128), seed=0, out_dir=tmp_path)
    assert len(ds) == 500 and ds.T == 5
    assert sum(1 for _ in tmp_path.rglob("*.png")) == 2500
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest) == 500
    assert Counter(manifest.values()) == {f"class_{c:02d}": 125 for c in range(4)}


def test_synthetic_is_pure_function_of_arguments():
    a = generate_synthetic_dataset(6, 3, 3, (100, 120), seed=5)
    b = generate_synthetic_dataset(6, 3, 3, (100, 120), seed=5)
    c = generate_synthetic_dataset(6, 3, 3, (100, 120), seed=6)
    for sa, sb in zip(a, b):
        for va, vb in zip(sa.sources, sb.sources):
            assert va.tobytes() == vb.tobytes()
    assert a[0].sources[0].tobytes() != c[0].sources[0].tobytes()
    assert a[0].view(0).shape == (100, 120, 3)


def test_synthetic_views_vary_over_time_but_stay_in_range():
    scene = generate_synthetic_dataset(1, 5, 1, (96, 96), seed=0)[0]
    views = scene.views
    assert all(v.dtype == np.float32 and v.min() >= 0 and v.max() <= 1 for v in views)
    assert all(not np.array_equal(views[0], v) for v in views[1:])


def test_synthetic_degenerate_single_scene_single_view():
    ds = generate_synthetic_dataset(1, 1, 1, (96, 96))
    assert len(ds) == 1 and ds[0].T == 1


@pytest.mark.parametrize("size", [(95, 128), (128, 40)])
def test_synthetic_rejects_small_size(size):
    with pytest.raises(ValueError, match="96"):
        generate_synthetic_dataset(2, 2, 2, size)


def test_roundtrip_is_lossless(tmp_path):
    ds = generate_synthetic_dataset(5, 3, 2, (96, 112), seed=1)
    write_scene_dataset(ds, tmp_path / "a")
    loaded = load_scene_dataset(tmp_path / "a", 3)
    assert loaded.scene_ids == ds.scene_ids
    assert loaded.labels == ds.labels
    for s0, s1 in zip(ds, loaded):
        for t in range(3):
            assert np.array_equal(s0.view(t), s1.view(t))
    write_scene_dataset(loaded, tmp_path / "b")
    again = load_scene_dataset(tmp_path / "b", 3)
    assert all(np.array_equal(x.view(t), y.view(t)) for x, y in zip(loaded, again) for t in range(3))


def test_view_files_sort_temporally_for_long_stacks(tmp_path):
    ds = generate_synthetic_dataset(1, 12, 1, (96, 96), seed=0, out_dir=tmp_path)
    loaded = load_scene_dataset(tmp_path, 12)
    for t in range(12):
        assert np.array_equal(loaded[0].view(t), ds[0].view(t))


def test_enumeration_order_independence(tmp_path, monkeypatch):
    generate_synthetic_dataset(4, 2, 2, (96, 96), seed=0, out_dir=tmp_path)
    first = load_scene_dataset(tmp_path, 2)
    real = pathlib.Path.iterdir

    def reversed_iterdir(self):
        return iter(sorted(real(self), reverse=True))

    monkeypatch.setattr(pathlib.Path, "iterdir", reversed_iterdir)
    assert next(tmp_path.iterdir()).name == "scene_3"
    second = load_scene_dataset(tmp_path, 2)
    assert first.scene_ids == second.scene_ids
    assert [s.sources for s in first] == [s.sources for s in second]


def test_labeled_layout(tmp_path):
    for cls, n in (("forest", 3), ("airport", 2), ("river", 4)):
        for i in range(n):
            _write_png(tmp_path / cls / f"img{i}.jpg", value=i)
    ds = load_labeled_dataset(tmp_path)
    assert ds.class_names == ["airport", "forest", "river"]
    assert ds.class_counts() == [2, 3, 4]
    assert ds.targets == [0, 0, 1, 1, 1, 2, 2, 2, 2]
    assert ds.image(0).shape == (96, 96, 3)


def test_labeled_empty_class_warns_and_is_kept(tmp_path):
    _write_png(tmp_path / "a" / "0.png")
    (tmp_path / "b").mkdir()
    with pytest.warns(UserWarning, match="'b' is empty"):
        ds = load_labeled_dataset(tmp_path)
    assert ds.class_names == ["a", "b"] and ds.class_counts() == [1, 0]


def test_labeled_zero_classes_is_error(tmp_path):
    with pytest.raises(DatasetLayoutError):
        load_labeled_dataset(tmp_path)


def test_labeled_export_and_in_memory_view_agree(tmp_path):
    scenes = generate_synthetic_dataset(8, 2, 4, (96, 96), seed=2)
    write_labeled_dataset(scenes, tmp_path)
    on_disk = load_labeled_dataset(tmp_path)
    in_mem = labeled_from_scenes(scenes)
    assert on_disk.class_names == in_mem.class_names
    assert sorted(zip(on_disk.targets, [i.split("/")[1][:-4] for i in on_disk.ids])) == \
        sorted(zip(in_mem.targets, in_mem.ids))
    assert in_mem.class_counts() == [2, 2, 2, 2]


def test_channel_stats_match_numpy():
    ds = generate_synthetic_dataset(3, 2, 2, (96, 96), seed=4)
    mean, std = channel_stats(ds)
    px = np.concatenate([v.reshape(-1, 3) for s in ds for v in s.views]).astype(np.float64)
    assert np.allclose(mean, px.mean(0), atol=1e-9)
    assert np.allclose(std, px.std(0), atol=1e-7)


def test_in_memory_scene_view_conversion():
    raw = np.arange(96 * 96 * 3, dtype=np.uint32).reshape(96, 96, 3) % 256
    scene = TemporalScene("x", (raw.astype(np.uint8),))
    assert scene.view(0).dtype == np.float32
    assert scene.view(0).max() == pytest.approx(1.0)
