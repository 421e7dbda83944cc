"""Datasets: procedural shape images and the CIFAR-10 binary reader."""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes


class DataFormatError(ValueError):
    """Raised for malformed dataset files."""


@dataclass
class LabeledDataset:
    """An image batch in [0,1] (N,C,H,W) with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""
    num_classes: int = 0

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N,C,H,W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError("labels length must match image count")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values must lie in [0, 1]")
        if self.num_classes == 0:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError("label out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, n: int) -> "LabeledDataset":
        return LabeledDataset(
            self.images[:n], self.labels[:n], self.split, self.num_classes
        )


SHAPE_CLASSES = ("disk", "square", "cross", "stripes")


def _render_shape(rng: np.random.Generator, cls: int) -> np.ndarray:
    h = w = 32
    bg = rng.uniform(0.1, 0.9, size=3)
    direction = np.where(bg > 0.5, -1.0, 1.0)
    fg = np.clip(bg + direction * rng.uniform(0.3, 0.6, size=3), 0.0, 1.0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = 16.0 + rng.uniform(-5, 5, size=2)
    r = rng.uniform(6.0, 11.0)

    if cls == 0:  # disk
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif cls == 1:  # square
        mask = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= 0.85 * r
    elif cls == 2:  # cross
        arm = 0.35 * r
        mask = (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r)
        mask |= (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r)
    else:  # stripes
        period = int(rng.integers(3, 7))
        phase = int(rng.integers(0, period))
        coord = yy if rng.random() < 0.5 else xx
        mask = ((coord.astype(np.int64) + phase) // period) % 2 == 0

    img = np.empty((3, h, w), dtype=np.float64)
    img[:] = bg[:, None, None]
    img[:, mask] = fg[:, None]
    img += rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_shapes_dataset(seed: int, n_per_class: int, split: str = "train") -> LabeledDataset:
    """Balanced 4-class 32x32 RGB procedural dataset, deterministic per seed.

    Classes: disk, square, cross, stripes; position, scale, colors, stripe
    pitch and pixel noise are all randomized per sample.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    split_id = zlib.crc32(split.encode("utf-8"))
    n = n_per_class * len(SHAPE_CLASSES)
    images = np.empty((n, 3, 32, 32), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n_per_class):
        for cls in range(len(SHAPE_CLASSES)):
            rng = np.random.default_rng([seed, split_id, cls, i])
            images[k] = _render_shape(rng, cls)
            labels[k] = cls
            k += 1
    return LabeledDataset(images, labels, split, num_classes=len(SHAPE_CLASSES))


def load_cifar10_bin(path) -> LabeledDataset:
    """Read CIFAR-10 binary batches (3073-byte records, pixels to [0,1]).

    ``path`` may be a single ``.bin`` file or a directory of them.
    """
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin")
        )
        if not files:
            raise DataFormatError(f"no .bin files under {path}")
    else:
        files = [path]

    all_images, all_labels = [], []
    for fname in files:
        with open(fname, "rb") as fh:
            raw = fh.read()
        if len(raw) == 0:
            raise DataFormatError(f"{fname}: empty dataset file")
        n, rem = divmod(len(raw), CIFAR_RECORD)
        if rem:
            raise DataFormatError(
                f"{fname}: record {n} incomplete at byte {n * CIFAR_RECORD} "
                f"(file size {len(raw)}, record size {CIFAR_RECORD})"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
        labels = arr[:, 0].astype(np.int64)
        if labels.max(initial=0) > 9:
            bad = int(np.argmax(labels > 9))
            raise DataFormatError(f"{fname}: record {bad} has label {labels[bad]} > 9")
        images = arr[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
        all_images.append(images)
        all_labels.append(labels)
    return LabeledDataset(
        np.concatenate(all_images), np.concatenate(all_labels), "cifar10", num_classes=10
    )
