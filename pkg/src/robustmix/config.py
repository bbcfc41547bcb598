"""Experiment configuration: one JSON document with sections
{model, data, attack, training, eval}; CLI flags override individual keys.
"""

from __future__ import annotations

import json
from pathlib import Path

from .attacks import (
    DEFAULT_FGSM_GRID,
    DEFAULT_PGD_ALPHA,
    DEFAULT_PGD_EPSILON,
    DEFAULT_PGD_ITER_GRID,
    AttackConfig,
)
from .data import Dataset, channel_stats, load_cifar10, split, subset, synth_dataset
from .errors import DataFormatError, UsageError
from .moe import TrainingConfig
from .nn import ModelSpec, small_resnet_spec, spec_from_dict

__all__ = [
    "default_config",
    "load_config",
    "parse_data_arg",
    "build_datasets",
    "build_model_spec",
    "build_attack_config",
    "build_training_config",
]


def default_config() -> dict:
    """Desk-scale defaults: small synthetic corpus, slim residual experts."""
    return {
        "model": {
            "input_shape": [3, 12, 12],
            "num_classes": 4,
            "widths": [8, 16, 32],
            "normalization": None,  # None: use empirical channel stats of the training data
        },
        "data": {
            "kind": "synth",
            "synth": {"kind": "gaussian-blobs", "n": 960, "classes": 4, "side": 12, "seed": 7},
            "path": None,
            "classes": None,
            "per_class": None,
            "train": 640,
            "test": 320,
        },
        "attack": {
            "epsilon": DEFAULT_PGD_EPSILON,
            "alpha": DEFAULT_PGD_ALPHA,
            "iterations": 10,
            "epsilon_grid": list(DEFAULT_FGSM_GRID),
            "iteration_grid": list(DEFAULT_PGD_ITER_GRID),
        },
        "training": {
            "batch_size": 64,
            "lr0": 0.05,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "seed": 0,
            "composition": {"benign": 1, "fgsm": 2, "pgd": 2},
            "expert_epochs": {"benign": 8, "fgsm": 16, "pgd": 10},
            "e2e_epochs": 6,
            "gate_warmup_epochs": 0,
        },
        "eval": {
            "fgsm_grid": list(DEFAULT_FGSM_GRID),
            "pgd_iteration_grid": list(DEFAULT_PGD_ITER_GRID),
            "batch_size": 256,
        },
    }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults deep-merged with an optional JSON config file."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {p} is not valid JSON: {e}") from None
        cfg = _merge(cfg, user)
    return cfg


def parse_data_arg(arg: str) -> dict:
    """Translate a --data value into a data section.

    Either a filesystem path to CIFAR-10 binaries or a synth spec of the form
    ``synth:gaussian-blobs,n=832,classes=2,side=12,seed=7``.
    """
    if not arg.startswith("synth:"):
        return {"kind": "cifar10", "path": arg}
    body = arg[len("synth:"):]
    parts = body.split(",")
    section = {"kind": "synth", "synth": {"kind": parts[0]}}
    for kv in parts[1:]:
        if "=" not in kv:
            raise UsageError(f"--data synth spec: expected key=value, got {kv!r}")
        key, value = kv.split("=", 1)
        try:
            section["synth"][key] = int(value)
        except ValueError:
            raise UsageError(f"--data synth spec: {key} must be an integer, got {value!r}") from None
    return section


def build_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    """(train, test) datasets from the data section."""
    d = cfg["data"]
    if d["kind"] == "synth":
        s = d["synth"]
        n_train, n_test = d["train"], d["test"]
        full = synth_dataset(s["kind"], n_train + n_test, s["classes"], s["side"], s["seed"])
        return split(full, n_train)
    if d["kind"] == "cifar10":
        if not d.get("path"):
            raise DataFormatError("data section: cifar10 requires a path")
        ds = load_cifar10(d["path"])
        if d.get("classes"):
            ds = subset(ds, d["classes"], d["per_class"], seed=d.get("subset_seed", 0))
        return split(ds, d["train"])
    raise DataFormatError(f"data section: unknown kind {d['kind']!r}")


def build_model_spec(cfg: dict, train_ds: Dataset) -> ModelSpec:
    m = cfg["model"]
    if m.get("layers"):
        return spec_from_dict(m)
    norm = m.get("normalization")
    if norm is None:
        normalization = channel_stats(train_ds)
    else:
        normalization = (tuple(norm["mean"]), tuple(norm["std"]))
    return small_resnet_spec(
        input_shape=tuple(m["input_shape"]),
        num_classes=m["num_classes"],
        widths=tuple(m["widths"]),
        normalization=normalization,
    )


def build_attack_config(cfg: dict, kind: str = "pgd") -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(
        kind=kind,
        epsilon=a["epsilon"],
        alpha=a["alpha"],
        iterations=a["iterations"],
        epsilon_grid=tuple(a["epsilon_grid"]),
        iteration_grid=tuple(a["iteration_grid"]),
    )


def build_training_config(cfg: dict, epochs: int, seed: int) -> TrainingConfig:
    t = cfg["training"]
    return TrainingConfig(
        epochs=epochs,
        batch_size=t["batch_size"],
        lr0=t["lr0"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        seed=seed,
        attack=build_attack_config(cfg),
        gate_warmup_epochs=t.get("gate_warmup_epochs", 0),
    )
