"""The seven-model desk roster: four normally trained architectures of
deliberately different shapes, plus adversarially retrained twins of the
three convolutional ones (batch mix 0.5, single-step examples at the
attack budget).  Architectural diversity is what creates the transfer gap
the evaluation protocols measure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import rng as _rng
from .data import Dataset
from .model_io import load_model, save_model
from .nn import (
    Architecture,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2x2,
    Relu,
    TrainConfig,
    TrainedModel,
    adversarial_train,
    train,
)

NORMAL_NAMES = ("mlp_small", "cnn_a", "cnn_b", "cnn_c")
ADVERSARIAL_NAMES = ("cnn_a_adv", "cnn_b_adv", "cnn_c_adv")
ROSTER = NORMAL_NAMES + ADVERSARIAL_NAMES

MANIFEST_NAME = "manifest.json"


def desk_architectures(input_shape=(1, 16, 16), num_classes=10) -> dict[str, Architecture]:
    k = num_classes
    return {
        "mlp_small": Architecture(input_shape, (Flatten(), Dense(128), Relu(), Dense(k)), k),
        "cnn_a": Architecture(input_shape, (Conv2d(3, 3, 8), Relu(), MaxPool2x2(),
                                            Conv2d(3, 3, 16), Relu(), MaxPool2x2(),
                                            Flatten(), Dense(k)), k),
        "cnn_b": Architecture(input_shape, (Conv2d(5, 5, 6), Relu(), MaxPool2x2(),
                                            Flatten(), Dense(64), Relu(), Dense(k)), k),
        "cnn_c": Architecture(input_shape, (Conv2d(3, 3, 8), Relu(), Conv2d(3, 3, 8), Relu(),
                                            MaxPool2x2(), Flatten(), Dense(k)), k),
    }


def _base_arch_name(name: str) -> str:
    return name[:-4] if name.endswith("_adv") else name


def train_zoo(dataset: Dataset, master_seed: int, epochs: int = 10, batch_size: int = 64,
              learning_rate: float = 0.05, sgd_momentum: float = 0.9,
              adversarial_mix: float = 0.5, adversarial_epsilon: float = 16 / 255,
              ) -> list[TrainedModel]:
    """Train the full roster deterministically from one master seed."""
    c, h, w = dataset.images.shape[1:]
    archs = desk_architectures((c, h, w), dataset.class_count)
    models = []
    for idx, name in enumerate(ROSTER):
        seed = _rng.substream_seed(master_seed, _rng.DOMAIN_TRAIN, idx)
        adv = name in ADVERSARIAL_NAMES
        cfg = TrainConfig(epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
                          sgd_momentum=sgd_momentum, seed=seed,
                          adversarial_mix=adversarial_mix if adv else 0.0,
                          adversarial_epsilon=adversarial_epsilon)
        arch = archs[_base_arch_name(name)]
        if adv:
            models.append(adversarial_train(arch, dataset, cfg, name=name))
        else:
            models.append(train(arch, dataset, cfg, name=name))
    return models


def save_zoo(models: list[TrainedModel], directory, extra: dict | None = None) -> Path:
    """Persist models plus a manifest mapping names to files and metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for model in models:
        file_name = f"{model.name}.gsnn"
        save_model(model, directory / file_name)
        entries.append({
            "name": model.name,
            "file": file_name,
            "training_kind": model.training_kind,
            "train_accuracy": model.train_accuracy,
        })
    manifest = {"models": entries}
    if extra:
        manifest.update(extra)
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_zoo(directory) -> list[TrainedModel]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no zoo manifest at {manifest_path}; run the train command first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    models = []
    for entry in manifest["models"]:
        models.append(load_model(directory / entry["file"], name=entry["name"],
                                 training_kind=entry["training_kind"],
                                 train_accuracy=entry.get("train_accuracy", float("nan"))))
    return models


def normal_models(models) -> list[TrainedModel]:
    return [m for m in models if m.training_kind == "normal"]


def adversarial_models(models) -> list[TrainedModel]:
    return [m for m in models if m.training_kind == "adversarial"]
