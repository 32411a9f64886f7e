"""CIFAR binary ingestion, a synthetic blob dataset, and training augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

PIXELS = 3 * 32 * 32
RECORDS_PER_BATCH = 10000

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

_VARIANTS = {
    # label bytes, label offset used, classes, train files, test files
    "cifar10": (1, 0, 10, [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": (2, 1, 100, ["train.bin"], ["test.bin"]),
}


class DataFormatError(ValueError):
    pass


@dataclass
class ImageBatch:
    images: np.ndarray  # [B, 3, H, W] float64
    labels: np.ndarray  # [B] int

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    source: str = "synthetic"
    role: str = "eval-train"
    indices: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray, role: str) -> "DatasetSplit":
        return DatasetSplit(self.images[idx], self.labels[idx], self.num_classes, self.source, role,
                            self.indices[idx])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None,
                drop_last: bool = False) -> Iterator[ImageBatch]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for i in range(0, stop, batch_size):
            idx = order[i : i + batch_size]
            yield ImageBatch(self.images[idx], self.labels[idx])


def search_halves(train: DatasetSplit) -> tuple[DatasetSplit, DatasetSplit]:
    """Split a training set into disjoint weight-training and architecture halves."""
    n = len(train)
    half = n // 2
    return (train.subset(np.arange(half), "search-train"),
            train.subset(np.arange(half, n), "search-val"))


# ---------------------------------------------------------------------------
# CIFAR


def _normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    x = pixels.astype(np.float64) / 255.0
    return (x - np.asarray(mean).reshape(1, 3, 1, 1)) / np.asarray(std).reshape(1, 3, 1, 1)


def read_cifar_file(path, variant: str = "cifar10", expected_records: Optional[int] = None):
    """Raw uint8 pixels [N, 3, 32, 32] and labels from one binary batch file."""
    label_bytes, label_at, classes, _, _ = _VARIANTS[variant]
    rec = label_bytes + PIXELS
    size = os.path.getsize(path)
    if expected_records is not None and size != expected_records * rec:
        raise DataFormatError(f"{path}: expected {expected_records * rec} bytes, found {size}")
    if size == 0 or size % rec:
        raise DataFormatError(f"{path}: size {size} is not a multiple of the {rec}-byte record")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, label_at].astype(np.int64)
    if labels.max() >= classes:
        raise DataFormatError(f"{path}: label byte {labels.max()} >= {classes} classes")
    return raw[:, label_bytes:].reshape(-1, 3, 32, 32), labels


def write_cifar_file(path, pixels: np.ndarray, labels: Sequence[int], variant: str = "cifar10") -> None:
    """Write records in the canonical binary layout (coarse label 0 for CIFAR-100)."""
    label_bytes = _VARIANTS[variant][0]
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), PIXELS)
    head = np.zeros((len(labels), label_bytes), dtype=np.uint8)
    head[:, -1] = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(np.concatenate([head, pixels], axis=1).tobytes())


def load_cifar_binary(path, variant: str = "cifar10", train: bool = True,
                      mean=None, std=None) -> DatasetSplit:
    """Load a CIFAR split from a directory of canonical batch files or a single file.

    Directory loads check the canonical record counts (10k per CIFAR-10 batch).
    """
    if variant not in _VARIANTS:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    _, _, classes, train_files, test_files = _VARIANTS[variant]
    if mean is None:
        mean, std = (CIFAR10_MEAN, CIFAR10_STD) if variant == "cifar10" else (CIFAR100_MEAN, CIFAR100_STD)
    path = Path(path)
    if path.is_dir():
        files = train_files if train else test_files
        per_file = RECORDS_PER_BATCH if variant == "cifar10" or not train else 5 * RECORDS_PER_BATCH
        parts = [read_cifar_file(path / f, variant, per_file) for f in files]
    else:
        parts = [read_cifar_file(path, variant)]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    return DatasetSplit(_normalize(pixels, mean, std), labels, classes, variant,
                        "eval-train" if train else "test")


# ---------------------------------------------------------------------------
# synthetic data


def _blob_centers(num_classes: int, size: int) -> np.ndarray:
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    r = size * 0.3
    return np.stack([size / 2 + r * np.sin(angles), size / 2 + r * np.cos(angles)], axis=1)


def synthetic_dataset(seed: int, num_samples: int, num_classes: int, size: int = 16,
                      noise: float = 0.3, role: str = "eval-train") -> DatasetSplit:
    """Class-conditional blob images: class k has a bright Gaussian blob at its own location.

    Labels are balanced (a shuffled round-robin); output is bit-deterministic per seed.
    """
    if size < 8:
        raise ValueError(f"synthetic images need size >= 8, got {size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    centers = _blob_centers(num_classes, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = size / 8
    jitter = rng.normal(scale=size / 32, size=(num_samples, 2))
    cy = centers[labels, 0] + jitter[:, 0]
    cx = centers[labels, 1] + jitter[:, 1]
    blob = np.exp(-((yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2) / (2 * sigma**2))
    color = 0.75 + 0.25 * rng.random((num_samples, 3))
    images = 2.0 * color[:, :, None, None] * blob[:, None] - 0.5
    images += noise * rng.standard_normal(images.shape)
    return DatasetSplit(images, labels.astype(np.int64), num_classes, "synthetic", role)


def synthetic_to_uint8(split: DatasetSplit) -> np.ndarray:
    """Quantize images to bytes for writing a CIFAR-layout fixture (32x32 only)."""
    x = split.images
    lo, hi = x.min(), x.max()
    return np.round((x - lo) / (hi - lo) * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# augmentation


def random_crop(images: np.ndarray, rng: np.random.Generator, padding: int = 4) -> np.ndarray:
    b, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * padding + 1, size=(b, 2))
    for i, (dy, dx) in enumerate(offs):
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def hflip(images: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    flip = rng.random(len(images)) < p
    out = images.copy()
    out[flip] = out[flip, :, :, ::-1]
    return out


def cutout(images: np.ndarray, rng: np.random.Generator, length: int = 16) -> np.ndarray:
    """Zero a ``length`` square centred at a uniform random pixel, clipped at the border."""
    if length <= 0:
        return images
    b, c, h, w = images.shape
    out = images.copy()
    cy = rng.integers(0, h, size=b)
    cx = rng.integers(0, w, size=b)
    for i in range(b):
        y0, y1 = max(cy[i] - length // 2, 0), min(cy[i] + length - length // 2, h)
        x0, x1 = max(cx[i] - length // 2, 0), min(cx[i] + length - length // 2, w)
        out[i, :, y0:y1, x0:x1] = 0.0
    return out


def augment(batch: ImageBatch, rng: np.random.Generator, crop_padding: int = 4,
            flip_p: float = 0.5, cutout_length: int = 16) -> ImageBatch:
    x = batch.images
    if crop_padding:
        x = random_crop(x, rng, crop_padding)
    if flip_p:
        x = hflip(x, rng, flip_p)
    x = cutout(x, rng, cutout_length)
    return ImageBatch(x, batch.labels.copy())
