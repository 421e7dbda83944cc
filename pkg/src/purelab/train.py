"""Classifier training: SGD with momentum, cosine learning-rate decay with
linear warm-up, and three data-augmentation presets.

Presets:
    vanilla  no augmentation
    base     resize-crop + horizontal flip
    strong   resize-crop, color jitter, grayscale, gaussian blur,
             solarization, equalization, horizontal flip

Augmentation draws are derived deterministically from (seed, epoch,
sample index), so identical recipes reproduce identical weights bit for
bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import ops
from .data import LabeledDataset
from .imageops import gaussian_blur
from .models import TinyResNet
from .tensor import Tensor

PRESETS = {
    "vanilla": (),
    "base": ("resize_crop", "horizontal_flip"),
    "strong": (
        "resize_crop",
        "color_jitter",
        "grayscale",
        "gaussian_blur",
        "solarize",
        "equalize",
        "horizontal_flip",
    ),
}


class TrainingDivergence(ArithmeticError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainRecipe:
    preset: str = "base"
    epochs: int = 10
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5.0e-4
    lr: float = 0.1
    warmup_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; use one of {sorted(PRESETS)}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


# ---------------------------------------------------------------------------
# augmentations (single image, CHW float32 in [0,1])
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _resize_crop(img, rng):
    h, w = img.shape[1], img.shape[2]
    side = int(round(h * np.sqrt(rng.uniform(0.6, 1.0))))
    side = max(1, min(side, h))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = img[:, top : top + side, left : left + side]
    iy = np.minimum(np.arange(h) * side // h, side - 1)
    ix = np.minimum(np.arange(w) * side // w, side - 1)
    return crop[:, iy][:, :, ix]


def _color_jitter(img, rng):
    img = img * rng.uniform(0.8, 1.2)  # brightness
    m = img.mean()
    img = m + rng.uniform(0.8, 1.2) * (img - m)  # contrast
    luma = np.tensordot(_LUMA, img, axes=(0, 0))[None]
    img = luma + rng.uniform(0.8, 1.2) * (img - luma)  # saturation
    return np.clip(img, 0.0, 1.0)


def _grayscale(img, rng):
    if rng.random() >= 0.2:
        return img
    luma = np.tensordot(_LUMA, img, axes=(0, 0))
    return np.repeat(luma[None], 3, axis=0)


def _gaussian_blur_aug(img, rng):
    if rng.random() >= 0.5:
        return img
    sigma = float(rng.uniform(0.1, 1.2))
    return gaussian_blur(img[None], sigma)[0]


def _solarize(img, rng):
    if rng.random() >= 0.2:
        return img
    return np.where(img > 0.5, 1.0 - img, img)


def _equalize(img, rng):
    if rng.random() >= 0.2:
        return img
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        q = np.minimum((img[c] * 255).astype(np.int64), 255)
        hist = np.bincount(q.reshape(-1), minlength=256)
        cdf = hist.cumsum()
        nz = cdf[cdf > 0]
        if nz.size == 0 or nz[0] == cdf[-1]:
            out[c] = img[c]
            continue
        lut = (cdf - nz[0]) / (cdf[-1] - nz[0])
        out[c] = lut[q]
    return out


def _horizontal_flip(img, rng):
    if rng.random() >= 0.5:
        return img
    return img[:, :, ::-1]


_AUG_FNS = {
    "resize_crop": _resize_crop,
    "color_jitter": _color_jitter,
    "grayscale": _grayscale,
    "gaussian_blur": _gaussian_blur_aug,
    "solarize": _solarize,
    "equalize": _equalize,
    "horizontal_flip": _horizontal_flip,
}


def augment(img: np.ndarray, preset: str, seed: int, epoch: int, index: int) -> np.ndarray:
    """Apply a preset's augmentation list to one image, deterministically."""
    names = PRESETS[preset]
    if not names:
        return img
    rng = np.random.default_rng([seed, 7919, epoch, index])
    out = img
    for name in names:
        out = _AUG_FNS[name](out, rng)
    return np.ascontiguousarray(out, dtype=np.float32)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def _lr_at(step: int, total_steps: int, warmup_steps: int, lr: float) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return 0.5 * lr * (1.0 + np.cos(np.pi * progress))


def accuracy(model: TinyResNet, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float((model.predict(images) == labels).mean())


def train(
    model: TinyResNet, dataset: LabeledDataset, recipe: TrainRecipe
) -> Dict[str, list]:
    """Train in place; returns per-epoch loss/accuracy history."""
    history: Dict[str, list] = {"loss": [], "train_acc": []}
    n = len(dataset)
    if n == 0:
        raise ValueError("empty training dataset")
    steps_per_epoch = (n + recipe.batch_size - 1) // recipe.batch_size
    total_steps = steps_per_epoch * recipe.epochs
    warmup_steps = steps_per_epoch * min(recipe.warmup_epochs, recipe.epochs)
    velocity = {k: np.zeros_like(v) for k, v in model.weights.items()}

    step = 0
    for epoch in range(recipe.epochs):
        order = np.random.default_rng([recipe.seed, 104729, epoch]).permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, recipe.batch_size):
            idx = order[s : s + recipe.batch_size]
            batch = np.stack(
                [
                    augment(dataset.images[i], recipe.preset, recipe.seed, epoch, int(i))
                    for i in idx
                ]
            )
            labels = dataset.labels[idx]
            params = model.param_tensors(requires_grad=True)
            logits, _, _ = model.forward_full(Tensor(batch), (), params)
            loss = ops.cross_entropy(logits, labels)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergence(
                    f"loss became non-finite at epoch {epoch} step {step}"
                )
            loss.backward()
            lr_t = _lr_at(step, total_steps, warmup_steps, recipe.lr)
            for name, w in model.weights.items():
                g = params[name].grad
                if g is None:
                    continue
                g = g + recipe.weight_decay * w
                v = velocity[name]
                v *= recipe.momentum
                v -= lr_t * g
                w += v
            epoch_loss += loss_val * len(idx)
            step += 1
        history["loss"].append(epoch_loss / n)
        history["train_acc"].append(accuracy(model, dataset.images, dataset.labels))
    return history
