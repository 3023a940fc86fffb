import os
from pathlib import Path
from typing import Any

import pytest
import torch

from continual_repr.config import ExperimentConfig
from continual_repr.datasets import DatasetInfo, DatasetStore, ImageSet, register_dataset

TOY_SIZE = 8
TOY_TRAIN_PER_CLASS = 12
TOY_TEST_PER_CLASS = 6

# One RGB base colour per class; samples are the colour plus noise.
_PALETTES = {
    "TOY4": [(230, 30, 30), (30, 230, 30), (30, 30, 230), (230, 230, 30)],
    "TOY4B": [(30, 230, 230), (230, 30, 230), (128, 128, 128), (250, 250, 250)],
    "TOY6": [
        (200, 20, 20),
        (20, 200, 20),
        (20, 20, 200),
        (200, 200, 20),
        (20, 200, 200),
        (200, 20, 200),
    ],
}


def _toy_loader(name: str):
    palette = _PALETTES[name]

    def _load(root: Path, split: str, download: bool) -> ImageSet:  # noqa: ARG001
        n = TOY_TRAIN_PER_CLASS if split == "train" else TOY_TEST_PER_CLASS
        g = torch.Generator().manual_seed(len(name) * 100 + (0 if split == "train" else 1))
        images, labels = [], []
        for c, colour in enumerate(palette):
            base = torch.tensor(colour, dtype=torch.float32).view(1, 3, 1, 1)
            noise = torch.randn(n, 3, TOY_SIZE, TOY_SIZE, generator=g) * 25
            images.append((base + noise).clamp(0, 255).to(torch.uint8))
            labels.append(torch.full((n,), c, dtype=torch.int64))
        return ImageSet(images=torch.cat(images), labels=torch.cat(labels))

    return _load


for _name, _palette in _PALETTES.items():
    register_dataset(
        DatasetInfo(
            name=_name,
            num_classes=len(_palette),
            image_size=TOY_SIZE,
            mean=(0.5, 0.5, 0.5),
            std=(0.25, 0.25, 0.25),
            loader=_toy_loader(_name),
        ),
        replace=True,
    )


def small_projector(objective: str) -> dict[str, Any]:
    if objective == "sl":
        return {"enabled": False}
    return {
        "hidden_dim": 32,
        "output_dim": 16,
        "output_l2_normalize": objective in {"trex", "supcon", "simclr"},
    }


def toy_config_data(tmp_path: Path, **overrides: Any) -> dict[str, Any]:
    objective = overrides.pop("objective", "sl")
    strategy = overrides.pop("strategy", "finetune")
    data: dict[str, Any] = {
        "name": "toy",
        "sequence": "TOY4/2",
        "objective": {"name": objective},
        "strategy": {"name": strategy, "predictor_hidden_dim": 32},
        "profile": "custom",
        "loop": {"epochs_first_task": 1, "epochs_per_task": 1, "batch_size": 16, "lr": 0.05},
        "seeds": [0],
        "output_dir": str(tmp_path / "runs"),
        "dataset_root": str(tmp_path / "data"),
        "device": "cpu",
        "projector": small_projector(objective),
        "eval": {"k": 5, "eval_batch_size": 64},
    }
    data.update(overrides)
    return data


def toy_config(tmp_path: Path, **overrides: Any) -> ExperimentConfig:
    return ExperimentConfig.model_validate(toy_config_data(tmp_path, **overrides))


@pytest.fixture
def store(tmp_path: Path) -> DatasetStore:
    return DatasetStore(tmp_path / "data")


slow = pytest.mark.skipif(
    os.environ.get("CONTINUAL_REPR_SLOW") != "1",
    reason="set CONTINUAL_REPR_SLOW=1 to run desk-scale checks",
)
