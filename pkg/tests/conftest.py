"""Shared fixtures: tiny network configs and toy datasets."""

from pathlib import Path

import numpy as np
import pytest
import torch

from density_adapt.config import ExperimentConfig, GapConfig, load_config
from density_adapt.data import PointAnnotation, Sample, gen_toy_domains
from density_adapt.data.scene import SceneMeta

# Small enough for CPU unit tests, large enough that 64 x 64 images still
# give 8 x 8 native maps for the map discriminator.
TINY_OVERRIDES = [
    "network.counter.block_channels=[8, 16, 16]",
    "network.counter.dilation_channels=16",
    "network.counter.spatial_channels=16",
    "network.counter.spatial_kernel=3",
    "network.discriminator.feature_channels=[8, 8, 8]",
    "network.discriminator.map_channels=[4, 8, 8]",
    "network.refiner.kernels=small",
    "network.refiner.channels=[4, 8, 8]",
    "train.lr_g=0.001",
    "train.lr_d=0.001",
    "train.lr_r=0.001",
    "train.batch_size=2",
    "train.max_steps=6",
    "train.eval_every=3",
    "train.patience=5",
    "train.refiner_batch_size=2",
    "train.refiner_max_steps=6",
    "train.refiner_eval_every=2",
    "data.toy.size=[64, 64]",
    "data.toy.n_images=12",
    "data.toy.count_range=[2, 12]",
]


def tiny_config_from(overrides: list[str] | None = None) -> ExperimentConfig:
    return load_config(overrides=TINY_OVERRIDES + list(overrides or []))


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    """Tiny networks and a short schedule writing under tmp_path."""
    return tiny_config_from([f"output_dir={tmp_path / 'runs'}"])


@pytest.fixture(scope="session")
def toy_domains() -> tuple[list[Sample], list[Sample]]:
    """Twelve 64 x 64 source and target toy images with the standard gap."""
    config = tiny_config_from()
    toy = config.data.toy
    return gen_toy_domains(0, 12, toy.size, GapConfig.standard(), toy)


@pytest.fixture
def source_samples(toy_domains) -> list[Sample]:
    return toy_domains[0]


@pytest.fixture
def target_samples(toy_domains) -> list[Sample]:
    return toy_domains[1]


def make_sample(name: str, points, size=(64, 64), channels: int = 1, seed: int = 0, meta: SceneMeta | None = None) -> Sample:
    """A random-image sample with the given head points."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(*size, channels)).astype(np.float32)
    return Sample(name=name, image=image, annotation=PointAnnotation(np.asarray(points, dtype=np.float64).reshape(-1, 2)), meta=meta)


@pytest.fixture
def dataset_dir(tmp_path) -> Path:
    """Three on-disk samples with 2, 0 and 15 heads."""
    from density_adapt.data import save_dataset

    rng = np.random.default_rng(3)
    samples = [
        make_sample("a", rng.uniform(1, 60, size=(2, 2)), seed=1),
        make_sample("b", np.zeros((0, 2)), seed=2),
        make_sample("c", rng.uniform(1, 60, size=(15, 2)), seed=3),
    ]
    root = tmp_path / "dataset"
    save_dataset(samples, root)
    return root


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)
