"""Fixtures shared by the training tests."""

from __future__ import annotations

import pytest

from eanmap.data.synthetic import Scene, generate_split
from eanmap.experiment import ExperimentConfig, build_config

TINY = {
    "scene": {
        "n_points": 4,
        "channels": 3,
        "height": 8,
        "width": 6,
        "max_instances": 3,
        "dividers": [1, 2],
        "boundaries": [0, 1],
        "crossings": [0, 0],
    },
    "decoder": {
        "layers": 2,
        "embed_dim": 8,
        "heads": 2,
        "sampling_points": 2,
        "n_points": 4,
        "groups": 3,
        "bev_channels": 3,
    },
    "train": {"epochs": 2, "batch_size": 2, "train_scenes": 4, "val_scenes": 2},
}


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return build_config(TINY)


@pytest.fixture
def tiny_scenes(tiny_config: ExperimentConfig) -> list[Scene]:
    return generate_split(tiny_config.scene, 4, seed=3, split="train")


@pytest.fixture
def tiny_val(tiny_config: ExperimentConfig) -> list[Scene]:
    return generate_split(tiny_config.scene, 2, seed=3, split="val")
