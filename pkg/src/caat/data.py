"""Datasets: seeded synthetic images and the CIFAR-10 binary batch format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import ArtifactError, ConfigError, ContractError, FormatError

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w] float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ContractError(
                f"images {self.images.shape} and labels {self.labels.shape} are inconsistent")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("images must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def take(self, index, split=None):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], split or self.split,
                       self.num_classes)

    def batches(self, batch_size, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def equals(self, other):
        return (self.split == other.split and self.num_classes == other.num_classes
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))


def concat_datasets(parts, split):
    parts = list(parts)
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), split,
                   max(p.num_classes for p in parts))


# -- synthetic --------------------------------------------------------------

_SPLIT_STREAMS = {"train": 1, "test": 2}


def class_templates(classes, image_size, channels, separation, seed):
    """Per-class mean images shared by every split generated from ``seed``.

    Every pixel sits at ``0.5 +/- separation / 2`` with a random sign per
    class, so two templates differ by ``separation`` wherever their signs
    disagree.
    """
    rng = np.random.default_rng([seed, 0])
    signs = rng.choice([-1.0, 1.0], size=(classes, channels, image_size, image_size))
    return 0.5 + signs * (separation / 2.0)


def generate_synthetic(classes=2, per_class=100, image_size=16, channels=3, separation=0.5,
                       seed=0, split="train", noise=0.1):
    """Class-conditional Gaussian images around fixed per-class templates.

    Templates depend only on ``seed``; the noise stream also depends on
    ``split``, so train and test samples never coincide.
    """
    if classes < 2:
        raise ConfigError(f"synthetic data needs at least 2 classes, got {classes}")
    if not separation > 0:
        raise ConfigError(f"separation must be positive, got {separation}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}")
    templates = class_templates(classes, image_size, channels, separation, seed)
    stream = _SPLIT_STREAMS.get(split)
    if stream is None:
        stream = 3 + sum(split.encode())
    rng = np.random.default_rng([seed, stream])
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = templates[labels] + noise * rng.standard_normal((len(labels),) + templates.shape[1:])
    return Dataset(np.clip(images, 0.0, 1.0), labels, split, classes)


def subsample(data: Dataset, n, seed=0) -> Dataset:
    """Uniform random subset of size ``n`` without replacement."""
    if not 0 <= n <= len(data):
        raise ContractError(f"cannot draw {n} samples from a dataset of {len(data)}")
    index = np.random.default_rng(seed).choice(len(data), size=n, replace=False)
    return data.take(index)


# -- persistence ----------------------------------------------------------------

def save_dataset(data: Dataset, path):
    header = {"kind": "dataset", "split": data.split, "num_classes": int(data.num_classes)}
    write_container(path, header, [("images", data.images),
                                   ("labels", data.labels.astype(np.float64))])


def load_dataset(path) -> Dataset:
    header, entries = read_container(path)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path}: container holds {header.get('kind')!r}, not a dataset")
    arrays = dict(entries)
    if set(arrays) != {"images", "labels"}:
        raise FormatError(f"{path}: dataset entries {sorted(arrays)} != ['images', 'labels']")
    return Dataset(arrays["images"], arrays["labels"].astype(np.int64), header["split"],
                   header["num_classes"])


# -- CIFAR-10 -----------------------------------------------------------------

def read_cifar10_batch(path, split="train") -> Dataset:
    """Parse one CIFAR-10 ``.bin`` batch: 1 label byte + 3072 channel-planar pixels."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"no such CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        offset = raw.size - raw.size % CIFAR_RECORD
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file length {raw.size} is not a multiple of {CIFAR_RECORD})")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(
            f"{path}: label {labels[bad[0]]} > 9 in record {bad[0]} "
            f"(byte offset {bad[0] * CIFAR_RECORD})")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, split, 10)


def load_cifar10_binary(directory):
    """Load the standard split: five training batches and one test batch."""
    directory = Path(directory)
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (directory / f).is_file()]
    if missing:
        raise ArtifactError(f"{directory}: missing CIFAR-10 batch files {missing}")
    train = concat_datasets((read_cifar10_batch(directory / f) for f in CIFAR_TRAIN_FILES),
                            "train")
    test = read_cifar10_batch(directory / CIFAR_TEST_FILE, "test")
    return train, test
