"""
Shared fixtures: tiny synthetic data, a tiny conv net and a desk-scale
experiment config that runs end to end in seconds.
"""

from pathlib import Path
from typing import Any

import numpy as np
import orjson
import pytest

from backdoorlab.data import Dataset, gen_synthetic, split
from backdoorlab.models import ArchSpec, ExperimentConfig, SplitSpec, conv, dense, flatten, maxpool, relu
from backdoorlab.nn_core import Model, init_model


IMAGE_SIZE = 8
NUM_CLASSES = 4


def tiny_body() -> list[dict[str, Any]]:
    return [
        {"kind": "conv", "out_channels": 4, "kernel": 3},
        {"kind": "relu"},
        {"kind": "maxpool", "pool": 2},
        {"kind": "flatten"},
    ]


@pytest.fixture
def tiny_arch() -> ArchSpec:
    """conv(4,3)-relu-pool(2)-flatten-dense(8)-relu-dense(4) on 1x8x8 inputs."""
    return ArchSpec(
        layers=[conv(4, 3), relu(), maxpool(2), flatten(), dense(8), relu(), dense(NUM_CLASSES)],
        input_shape=(1, IMAGE_SIZE, IMAGE_SIZE),
        num_classes=NUM_CLASSES,
    )


@pytest.fixture
def tiny_model(tiny_arch: ArchSpec) -> Model:
    return init_model(tiny_arch, seed=0)


@pytest.fixture
def synthetic() -> Dataset:
    """120 samples, 4 balanced classes, 1x8x8."""
    return gen_synthetic(NUM_CLASSES, 30, IMAGE_SIZE, seed=0)


@pytest.fixture
def partitions(synthetic: Dataset):
    return split(synthetic, SplitSpec(train=0.75, test=0.25, seed=0))


@pytest.fixture
def small_config_data() -> dict[str, Any]:
    """Standalone super-fine-tuning experiment small enough for unit tests."""
    return {
        "version": "1.0",
        "scenario": "standalone",
        "dataset": {
            "kind": "synthetic",
            "num_classes": NUM_CLASSES,
            "n_per_class": 20,
            "image_size": IMAGE_SIZE,
            "seed": 0,
            "test_fraction": 0.25,
        },
        "arch": {"layers": tiny_body()},
        "attack": {
            "trigger": {"kind": "patch", "size": 2, "position": "bottom-right", "value": 1.0},
            "target_label": 0,
            "poison_ratio": 0.1,
            "seed": 0,
        },
        "attack_training": {
            "epochs": 3,
            "batch_size": 16,
            "schedule": {"kind": "constant", "lr": 0.05},
            "momentum": 0.9,
        },
        "defense": {
            "kind": "super_ft",
            "epochs": 2,
            "schedule": {
                "kind": "superft",
                "lr_base": 0.0003,
                "lr_max1": 0.05,
                "lr_max2": 0.001,
                "cycle_len_steps": 4,
                "phase1_epochs": 1,
            },
        },
        "eval": {"batch_size": 64, "per_epoch": True},
        "sequela": {"mia": False, "reinjection_ratios": []},
        "seeds": [0],
        "output_dir": "results",
    }


@pytest.fixture
def small_config(small_config_data: dict[str, Any]) -> ExperimentConfig:
    return ExperimentConfig(**small_config_data)


@pytest.fixture
def write_config(tmp_path: Path):
    """Write a config dict as JSON under tmp_path and return its path."""

    def _write(data: dict[str, Any], name: str = "experiment.json") -> Path:
        path = tmp_path / name
        path.write_bytes(orjson.dumps(data, option=orjson.OPT_INDENT_2))
        return path

    return _write


def constant_head(model: Model, winner: int) -> Model:
    """Copy of `model` whose head always predicts `winner`."""
    forced = model.copy()
    w, b = forced.head_indices
    forced.params[w][...] = 0.0
    forced.params[b][...] = 0.0
    forced.params[b][winner] = 10.0
    return forced


def empty_like(dataset: Dataset) -> Dataset:
    return Dataset(
        images=np.zeros((0, *dataset.image_shape), dtype=np.float32),
        labels=np.zeros(0, dtype=np.int64),
        num_classes=dataset.num_classes,
        name="empty",
    )
