import os

os.environ.setdefault("CELERY_TASK_ALWAYS_EAGER", "true")

import pytest
import torch

from app.backend.operations import ManifestRecord, write_manifest
from app.backend.phantoms import PHANTOM_SPACING
from app.config import (
    DecoderConfig,
    DinoConfig,
    LoRAConfig,
    PathsConfig,
    PreprocessConfig,
    ResamplerConfig,
    RunConfig,
    StageConfig,
    ViTConfig,
    ZFormerConfig,
)
from app.tasks import synthesize_example

TINY_SHAPE = (8, 16, 16)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long learning runs, enabled with MSVLM_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("MSVLM_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set MSVLM_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_stages(**overrides) -> dict[str, StageConfig]:
    stages = {}
    for stage, optimizer in (("lm", "adamw"), ("0", "adam"), ("1", "adam"), ("2", "adamw"), ("3", "adamw")):
        fields = {"stage": stage, "epochs": 2, "optimizer": optimizer, "lr": 1e-3,
                  "warmup_steps": 2, "batch_size": 2, "max_steps": 3}
        fields.update(overrides)
        stages[stage] = StageConfig(**fields)
    return stages


@pytest.fixture
def tiny_run(tmp_path) -> RunConfig:
    """A run small enough to train every stage in seconds."""
    return RunConfig(
        paths=PathsConfig(data_dir=tmp_path / "data", checkpoint_dir=tmp_path / "ckpt", output_dir=tmp_path / "out"),
        vit=ViTConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2),
        dino=DinoConfig(out_dim=32, hidden_dim=16, bottleneck_dim=8, n_global=2, n_local=2),
        zformer=ZFormerConfig(depth=1, dim=16, heads=2, window_size=4, num_random_blocks=1, max_len=16),
        resampler=ResamplerConfig(num_queries=4, query_dim=16, depth=1, heads=2),
        decoder=DecoderConfig(dim=16, depth=1, heads=2, max_positions=256),
        lora=LoRAConfig(rank=2, alpha=4.0),
        preprocess=PreprocessConfig(target_spacing=PHANTOM_SPACING),
        stages=tiny_stages(),
        seed=0,
    )


@pytest.fixture
def tiny_dataset(tiny_run) -> list[ManifestRecord]:
    """Four training phantoms and one test phantom written under the run's data_dir."""
    data_dir = tiny_run.paths.data_dir
    records = [
        ManifestRecord.model_validate(
            synthesize_example(seed, TINY_SHAPE, str(data_dir), "test" if seed == 4 else "train")
        )
        for seed in range(5)
    ]
    write_manifest(records, tiny_run.paths.manifest_path)
    return records


def finite_difference_grad(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of the scalar fn() with respect to every entry of tensor (modified in place)."""
    grad = torch.zeros_like(tensor)
    flat, flat_grad = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        original = flat[i].item()
        flat[i] = original + eps
        plus = float(fn())
        flat[i] = original - eps
        minus = float(fn())
        flat[i] = original
        flat_grad[i] = (plus - minus) / (2 * eps)
    return grad


@pytest.fixture
def fd_grad():
    return finite_difference_grad
