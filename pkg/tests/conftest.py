import numpy as np
import pytest

from centeruda.data import DomainStyle, SceneSpec, generate_dataset
from centeruda.model import ArchitectureDescriptor, build_model
from centeruda.utils.config import TrainConfig

TINY_ARCH = ArchitectureDescriptor(stem_channels=4, stage_channels=(8, 8), residual_blocks=1, head_channels=8)
TINY_CLASSES = 3
TINY_SIZE = 32


def tiny_scene(domain="source", labeled=True, object_count=(1, 2)):
    return SceneSpec(
        image_size=(TINY_SIZE, TINY_SIZE),
        num_classes=TINY_CLASSES,
        object_count=object_count,
        object_size=(8, 14),
        style=DomainStyle(domain=domain, intensity_shift=0.1, noise_std=0.03, blur_radius=0.8, texture=0.2),
        labeled=labeled,
    )


def tiny_config(tmp_path, **changes):
    values = dict(
        num_classes=TINY_CLASSES,
        dtype="float64",
        deterministic=True,
        jobs=1,
        stem_channels=4,
        stage_channels=(8, 8),
        residual_blocks=1,
        head_channels=8,
        image_size=TINY_SIZE,
        min_object_size=8,
        max_object_size=14,
        source_batch_size=2,
        target_batch_size=2,
        epochs=1,
        checkpoint_every=0,
        output_dir=str(tmp_path / "run"),
    )
    values.update(changes)
    return TrainConfig(**values)


@pytest.fixture
def tiny_params():
    return build_model(TINY_ARCH, TINY_CLASSES, seed=0, dtype=np.float64)


@pytest.fixture
def source_manifest(tmp_path):
    return generate_dataset(tiny_scene("source"), 4, seed=0, out_dir=tmp_path / "source")


@pytest.fixture
def target_manifest(tmp_path):
    return generate_dataset(tiny_scene("target", labeled=False), 6, seed=100, out_dir=tmp_path / "target")


@pytest.fixture
def test_manifest(tmp_path):
    return generate_dataset(tiny_scene("target"), 3, seed=200, out_dir=tmp_path / "test")
