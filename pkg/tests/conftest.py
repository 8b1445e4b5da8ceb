import math
from pathlib import Path

import numpy as np
import pytest
import torch

from unposed3d.data import build_dataset
from unposed3d.model import tiny_config
from unposed3d.training import TrainConfig


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """2 objects, 12 frames at 32x32; shared across the suite."""
    d = tmp_path_factory.mktemp("tiny_dataset")
    build_dataset(
        2, d, frames_per_object=12, holdout_per_object=4,
        resolution=32, theta=math.pi / 18, seed=7,
    )
    return d


@pytest.fixture(scope="session")
def one_object_dataset(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("one_obj_dataset")
    build_dataset(
        1, d, frames_per_object=10, holdout_per_object=4,
        resolution=32, theta=math.pi / 18, seed=11,
    )
    return d


def tiny_train_config(**overrides) -> TrainConfig:
    defaults = dict(
        model=tiny_config(32),
        render_resolution=32,
        samples_per_ray=24,
        learning_rate=2e-3,
        warmup_steps=50,
        total_steps=400,
        frames_per_object_per_step=6,
        posed_views_per_step=2,
        sds_views=2,
        pseudo_views_per_step=4,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
