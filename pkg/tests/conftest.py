import pytest
import torch

from temporal_distill.network import BackboneConfig, HeadConfig
from temporal_distill.pretrainer import PretrainConfig
from temporal_distill.scene_store import generate_synthetic_dataset
from temporal_distill.view_sampler import CropSpec


def tiny_pretrain_config(**kw) -> PretrainConfig:
    """Small enough to run a few epochs in seconds."""
    base = dict(
        epochs=2,
        scenes_per_step=2,
        crop_spec=CropSpec(n_global=2, n_local=4, global_size=32, local_size=16),
        backbone=BackboneConfig.for_arch("tiny_cnn"),
        head=HeadConfig(in_dim=64, hidden_dims=(32, 16), out_dim=32),
    )
    base.update(kw)
    return PretrainConfig(**base)


@pytest.fixture(scope="session")
def small_scenes():
    return generate_synthetic_dataset(6, 3, 2, (96, 96), seed=3)


@pytest.fixture(autouse=True)
def _restore_torch_rng():
    state = torch.get_rng_state()
    yield
    torch.set_rng_state(state)


# --- desk-scale run shared by the slow tests and the acceptance suite -------

DESK_EPOCHS = 20


def desk_pretrain_config() -> PretrainConfig:
    """tiny_cnn with the default crop counts at reduced crop resolution (64/32 on 128px scenes)."""
    return PretrainConfig(
        epochs=DESK_EPOCHS,
        scenes_per_step=8,
        crop_spec=CropSpec(global_size=64, local_size=32),
        backbone=BackboneConfig.for_arch("tiny_cnn"),
        head=HeadConfig(in_dim=64),
        seed=0,
    )


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    from temporal_distill.pretrainer import pretrain

    out = tmp_path_factory.mktemp("desk_run")
    scenes = generate_synthetic_dataset(500, 5, 4, (128, 128), seed=0)
    return pretrain(scenes, desk_pretrain_config(), out_dir=out), out


@pytest.fixture(scope="session")
def desk_downstream():
    from temporal_distill.scene_store import labeled_from_scenes

    return labeled_from_scenes(generate_synthetic_dataset(1000, 1, 4, (128, 128), seed=1))


# --- acceptance verdicts, echoed once more at the end of the session ----------

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
