import pytest
import torch

from temporal_distill.distill import DistillState, multiview_loss
from temporal_distill.network import (
    BackboneConfig,
    HeadConfig,
    ProjectionHead,
    build_pair,
    export_backbone,
    forward_multires,
    load_backbone,
    random_backbone,
)
from temporal_distill.scene_store import generate_synthetic_dataset
from temporal_distill.view_sampler import CropSpec, ViewBatch, sample_views

TINY = BackboneConfig.for_arch("tiny_cnn")
TINY_HEAD = HeadConfig(in_dim=64)


@pytest.fixture(scope="module")
def resnet_pair():
    return build_pair(BackboneConfig(), HeadConfig(), init_seed=0)


def test_head_layer_widths():
    head = ProjectionHead(HeadConfig())
    linears = [m for m in head.modules() if isinstance(m, torch.nn.Linear)]
    assert [(m.in_features, m.out_features) for m in linears] == [(512, 512), (512, 64), (64, 2048)]


def test_dino_compat_head_output_dim():
    head = ProjectionHead(HeadConfig(dino_head_compat=True))
    assert head(torch.randn(3, 512)).shape == (3, 2048)


@pytest.mark.parametrize("size", [96, 224])
def test_resnet_pair_output_dim_any_resolution(resnet_pair, size):
    resnet_pair.eval()
    with torch.no_grad():
        assert resnet_pair.student(torch.randn(2, 3, size, size)).shape == (2, 2048)
        assert resnet_pair.teacher(torch.randn(2, 3, size, size)).shape == (2, 2048)
    resnet_pair.train()


@pytest.mark.parametrize("mode", [True, False])
def test_teacher_equals_student_at_build(mode):
    pair = build_pair(TINY, TINY_HEAD, init_seed=3)
    pair.train(mode)
    s, t = pair.student.state_dict(), pair.teacher.state_dict()
    assert s.keys() == t.keys()
    assert all(torch.equal(s[k], t[k]) for k in s)
    x = torch.randn(5, 3, 40, 40)
    with torch.no_grad():
        assert torch.equal(pair.student(x), pair.teacher(x))


def test_teacher_is_not_trainable_and_stays_gradient_free():
    pair = build_pair(TINY, HeadConfig(in_dim=64, out_dim=32), init_seed=0)
    assert all(not p.requires_grad for p in pair.teacher.parameters())
    state = DistillState.zeros(32)
    for _ in range(3):
        x = torch.randn(6, 3, 32, 32)
        t = pair.teacher(x[:2])
        s = pair.student(x)
        multiview_loss(t, s, [0, 1], state).backward()
    assert all(p.grad is None for p in pair.teacher.parameters())
    assert any(p.grad is not None for p in pair.student.parameters())


def test_teacher_forward_leaves_running_stats_alone():
    pair = build_pair(TINY, TINY_HEAD)
    before = {k: v.clone() for k, v in pair.teacher.state_dict().items()}
    with torch.no_grad():
        pair.teacher(torch.randn(4, 3, 32, 32))
    assert all(torch.equal(before[k], v) for k, v in pair.teacher.state_dict().items())


def test_same_seed_same_init_and_rng_untouched():
    torch.manual_seed(42)
    expected_next = torch.rand(1)
    torch.manual_seed(42)
    a = build_pair(TINY, TINY_HEAD, init_seed=7)
    assert torch.equal(torch.rand(1), expected_next)
    b = build_pair(TINY, TINY_HEAD, init_seed=7)
    c = build_pair(TINY, TINY_HEAD, init_seed=8)
    sa, sb, sc = a.student.state_dict(), b.student.state_dict(), c.student.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_head_input_mismatch_rejected():
    with pytest.raises(ValueError, match="512"):
        build_pair(TINY, HeadConfig(in_dim=512))


def test_feature_dim_must_match_arch():
    with pytest.raises(ValueError):
        BackboneConfig("tiny_cnn", 512)


def _batch(n_global=2, n_local=4, seed=0):
    scene = generate_synthetic_dataset(1, 2, 1, (96, 96), seed=seed)[0]
    return sample_views(scene, CropSpec(n_global=n_global, n_local=n_local, global_size=48, local_size=24), seed)


def test_forward_multires_shapes_and_single_crop():
    pair = build_pair(TINY, HeadConfig(in_dim=64, out_dim=100)).eval()
    batch = _batch()
    with torch.no_grad():
        assert forward_multires(pair.student, batch).shape == (6, 100)
        assert forward_multires(pair.student, batch, kind="global").shape == (2, 100)
        one = ViewBatch([batch.crops[3]])
        assert forward_multires(pair.student, one).shape == (1, 100)


def test_forward_multires_full_crop_batch(resnet_pair):
    resnet_pair.eval()
    scene = generate_synthetic_dataset(1, 5, 1, (224, 224), seed=0)[0]
    batch = sample_views(scene, CropSpec(), 0)
    with torch.no_grad():
        assert forward_multires(resnet_pair.student, batch).shape == (40, 2048)
    resnet_pair.train()


def test_permuting_crops_permutes_rows():
    pair = build_pair(TINY, TINY_HEAD).eval()
    batch = _batch(seed=1)
    perm = torch.randperm(len(batch), generator=torch.Generator().manual_seed(0)).tolist()
    permuted = ViewBatch([batch.crops[i] for i in perm])
    with torch.no_grad():
        out = forward_multires(pair.student, batch)
        out_p = forward_multires(pair.student, permuted)
    assert torch.allclose(out[perm], out_p, atol=1e-5)


def test_multiple_scenes_concatenate_in_order():
    pair = build_pair(TINY, TINY_HEAD).eval()
    b1, b2 = _batch(seed=1), _batch(seed=2)
    with torch.no_grad():
        both = forward_multires(pair.student, [b1, b2])
        assert torch.allclose(both[:6], forward_multires(pair.student, b1), atol=1e-5)
        assert torch.allclose(both[6:], forward_multires(pair.student, b2), atol=1e-5)


def test_export_roundtrip_and_no_head(tmp_path, resnet_pair):
    path = tmp_path / "backbone.ckpt"
    art = export_backbone(resnet_pair, path, {"note": "x"})
    head_shapes = {(512, 512), (64, 512), (512, 64), (2048, 64), (64, 2048)}
    assert all(tuple(v.shape) not in head_shapes for v in art["state"].values())
    assert all(k.startswith("backbone.") for k in art["state"])
    net, meta = load_backbone(path)
    assert meta == {"note": "x"}
    resnet_pair.teacher.eval()
    x = torch.randn(2, 3, 224, 224)
    with torch.no_grad():
        want = resnet_pair.teacher.backbone(x)
        got = net(x)
    resnet_pair.train()
    assert got.shape == (2, 512)
    assert torch.equal(got, want)


def test_export_takes_teacher_not_student():
    pair = build_pair(TINY, TINY_HEAD)
    with torch.no_grad():
        for p in pair.student.parameters():
            p.add_(1.0)
    net, _ = load_backbone(export_backbone(pair))
    t = pair.teacher.backbone.state_dict()
    assert all(torch.equal(v, t[k]) for k, v in net.state_dict().items())


def test_load_rejects_foreign_artifact():
    with pytest.raises(ValueError, match="format"):
        load_backbone({"format": "other", "state": {}})


def test_random_backbone_seeded():
    a, b = random_backbone("tiny_cnn", 1), random_backbone("tiny_cnn", 1)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    assert not a.training
