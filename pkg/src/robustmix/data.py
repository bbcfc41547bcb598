"""Datasets: CIFAR-10 binary ingestion, synthetic corpora, batching.

Images live in [0,1] as float64 NCHW arrays; attacks and perturbation budgets
are defined in this raw pixel space.  Per-channel normalization happens inside
the models, not here.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .tensor import Tensor, channel_affine

__all__ = [
    "CIFAR10_MEAN",
    "CIFAR10_STD",
    "Dataset",
    "BatchPlan",
    "load_cifar10",
    "normalize",
    "make_batches",
    "synth_dataset",
    "subset",
    "split",
    "channel_stats",
]

# Empirical CIFAR-10 channel statistics used for input normalization.
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2023, 0.1994, 0.2010)

_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes


@dataclass
class Dataset:
    """Immutable image classification dataset.

    images: [N,C,H,W] float64 in [0,1]; labels: int64 in [0, class_count).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"Dataset: images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"Dataset: {self.images.shape[0]} images but labels shape {self.labels.shape}"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("Dataset: pixel values must lie in [0,1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"Dataset: labels must lie in [0,{self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class BatchPlan:
    batch_size: int
    shuffle: bool = True
    seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"BatchPlan: batch_size must be >= 1, got {self.batch_size}")


def load_cifar10(path, class_count: int = 10, name: str = "cifar10") -> Dataset:
    """Read CIFAR-10 binary batch files (3073-byte records, R then G then B).

    ``path`` may be a single .bin file or a directory of them.
    """
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.bin"))
        if not files:
            raise DataFormatError(f"load_cifar10: no .bin files in {p}")
    elif p.is_file():
        files = [p]
    else:
        raise DataFormatError(f"load_cifar10: no such file or directory: {p}")

    images, labels = [], []
    base_index = 0
    for f in files:
        raw = np.frombuffer(f.read_bytes(), dtype=np.uint8)
        if raw.size % _CIFAR_RECORD != 0:
            raise DataFormatError(
                f"load_cifar10: {f} has {raw.size} bytes, not a multiple of {_CIFAR_RECORD}"
            )
        records = raw.reshape(-1, _CIFAR_RECORD)
        lab = records[:, 0].astype(np.int64)
        bad = np.nonzero(lab >= class_count)[0]
        if bad.size:
            raise DataFormatError(
                f"load_cifar10: record {base_index + int(bad[0])} has label byte {int(lab[bad[0]])}"
            )
        pix = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
        images.append(pix)
        labels.append(lab)
        base_index += records.shape[0]
    return Dataset(np.concatenate(images), np.concatenate(labels), class_count, name=name)


def normalize(x, mean, std):
    """Per-channel (x - mean) / std over the channel axis of NCHW or CHW data.

    Accepts a plain array or a Tensor; a Tensor stays differentiable.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("normalize: std must be positive for every channel")
    is_tensor = isinstance(x, Tensor)
    arr = x.data if is_tensor else np.asarray(x, dtype=np.float64)
    c_axis = arr.ndim - 3
    if c_axis < 0 or arr.shape[c_axis] != mean.shape[0] or mean.shape != std.shape:
        raise ValueError(
            f"normalize: channel mismatch, data shape {arr.shape} vs {mean.shape[0]} channels"
        )
    if is_tensor:
        if arr.ndim != 4:
            raise ValueError("normalize: Tensor input must be NCHW")
        return channel_affine(x, Tensor(1.0 / std), Tensor(-mean / std))
    shape = (-1,) + (1,) * 2
    return (arr - mean.reshape(shape)) / std.reshape(shape)


def make_batches(ds: Dataset, plan: BatchPlan, epoch: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split one epoch into (images, labels) batches.

    The permutation is a pure function of (plan.seed, epoch); with
    shuffle=False the order is the identity.  The final short batch is kept
    unless drop_last.
    """
    n = len(ds)
    if plan.shuffle:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=int(plan.seed), spawn_key=(int(epoch),)))
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    batches = []
    for start in range(0, n, plan.batch_size):
        idx = order[start : start + plan.batch_size]
        if plan.drop_last and idx.size < plan.batch_size:
            break
        batches.append((ds.images[idx], ds.labels[idx]))
    return batches


def synth_dataset(
    kind: str,
    n: int,
    classes: int,
    side: int,
    seed: int,
    *,
    channels: int = 3,
    noise: float = 0.11,
    dense_amplitude: float = 0.06,
    coarse_amplitude: float = 0.22,
    coarse_fraction: float = 0.4,
    cell: int = 3,
    stripe_amplitude: float = 0.16,
) -> Dataset:
    """Deterministic synthetic image corpus, separable by a small CNN.

    gaussian-blobs: each class mean combines a per-pixel sign template of
    small amplitude (high-frequency, easily erased by small max-norm
    perturbations) with a cell-structured sign template of large amplitude on
    a subset of cells (low-frequency, survives every budget on the default
    grids), plus iid gaussian noise.  The split gives clean-trained models
    something fragile to latch onto while adversarially trained models can
    fall back on the coarse component.

    striped-patches: each class is a fixed binary stripe pattern (distinct
    orientation/frequency per class) plus noise.
    """
    if n < classes:
        raise ValueError(f"synth_dataset: need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    shape = (classes, channels, side, side)

    if kind == "gaussian-blobs":
        dense = rng.choice([-1.0, 1.0], size=shape)
        grid = -(-side // cell)  # cells per axis, last cell may be cropped
        coarse_cells = rng.choice([-1.0, 1.0], size=(classes, channels, grid, grid))
        mask_cells = rng.random((channels, grid, grid)) < coarse_fraction
        up = np.kron(coarse_cells * mask_cells, np.ones((cell, cell)))[:, :, :side, :side]
        means = 0.5 + dense_amplitude * dense + coarse_amplitude * up
    elif kind == "striped-patches":
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
        means = np.empty(shape)
        for k in range(classes):
            angle = np.pi * k / classes
            period = 3.0 + (k % 3)
            wave = np.sign(np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / period + 0.25))
            means[k] = 0.5 + stripe_amplitude * wave
    else:
        raise ValueError(f"synth_dataset: unknown kind {kind!r}")

    images = means[labels] + noise * rng.standard_normal((n, channels, side, side))
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes, name=f"synth-{kind}")


def subset(ds: Dataset, classes, per_class: int, seed: int) -> Dataset:
    """Deterministic class-balanced subset with labels remapped to 0..len-1."""
    classes = list(classes)
    rng = np.random.default_rng(seed)
    deficits = {}
    chosen = []
    for new_label, cls in enumerate(classes):
        idx = np.nonzero(ds.labels == cls)[0]
        if idx.size < per_class:
            deficits[cls] = per_class - idx.size
            continue
        pick = rng.choice(idx, size=per_class, replace=False)
        chosen.append((pick, new_label))
    if deficits:
        raise ValueError(f"subset: insufficient samples per class, deficits {deficits}")
    images = np.concatenate([ds.images[pick] for pick, _ in chosen])
    labels = np.concatenate([np.full(pick.size, lab, dtype=np.int64) for pick, lab in chosen])
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order], len(classes), name=f"{ds.name}-subset")


def split(ds: Dataset, n_first: int) -> tuple[Dataset, Dataset]:
    """Slice a dataset into (first n, rest), preserving order."""
    if not 0 < n_first < len(ds):
        raise ValueError(f"split: n_first must be in (0,{len(ds)}), got {n_first}")
    head = replace(ds, images=ds.images[:n_first], labels=ds.labels[:n_first])
    tail = replace(ds, images=ds.images[n_first:], labels=ds.labels[n_first:])
    return head, tail


def channel_stats(ds: Dataset) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Empirical per-channel mean and std of a dataset's pixels."""
    mean = ds.images.mean(axis=(0, 2, 3))
    std = ds.images.std(axis=(0, 2, 3))
    std = np.maximum(std, 1e-6)
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)
