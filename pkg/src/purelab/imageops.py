"""Image-space operators: purification guides and projection utilities.

All functions here work on plain numpy image batches (B, C, H, W) with
values in [0, 1]; they are pure and safe to call concurrently on disjoint
arrays. The differentiable gaussian path for guide-through gradients
lives in :func:`purelab.ops.gaussian_blur`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

_MEDIAN_WINDOWS = (3, 5, 7)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-d gaussian taps, radius ceil(3*sigma), float64."""
    if sigma <= 0:
        raise ValueError(f"gaussian blur requires sigma > 0, got {sigma}")
    r = int(np.ceil(3.0 * sigma))
    i = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian blur, reflect padding, output clipped to [0,1]."""
    k = gaussian_kernel1d(sigma).astype(x.dtype)
    r = len(k) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(x)
    for t in range(len(k)):
        out += k[t] * xp[:, :, t : t + x.shape[2], :]
    xp = np.pad(out, ((0, 0), (0, 0), (0, 0), (r, r)), mode="reflect")
    out = np.zeros_like(x)
    for t in range(len(k)):
        out += k[t] * xp[:, :, :, t : t + x.shape[3]]
    return np.clip(out, 0.0, 1.0)


def median_filter(x: np.ndarray, k: int) -> np.ndarray:
    """Per-channel k x k sliding-window median with reflect padding."""
    if k % 2 == 0:
        raise ValueError(f"median filter window must be odd, got {k}")
    return kernels.median_filter2d(np.ascontiguousarray(x), k)


def total_variation(x: np.ndarray) -> float:
    """Isotropic TV summed over channels (forward differences)."""
    dx = np.diff(x, axis=-1, append=x[..., -1:])
    dy = np.diff(x, axis=-2, append=x[..., -1:, :])
    return float(np.sqrt(dx * dx + dy * dy).sum())


def _tv_channel(x: np.ndarray, weight: float, iters: int) -> np.ndarray:
    # Chambolle dual projection for min_u 0.5*||u - x||^2 + weight*TV(u)
    h, w = x.shape
    p = np.zeros((2, h, w), dtype=np.float64)
    tau = 0.248
    u = x.astype(np.float64)
    for _ in range(iters):
        div_p = np.zeros((h, w))
        div_p[:-1] += p[0, :-1]
        div_p[1:] -= p[0, :-1]
        div_p[:, :-1] += p[1, :, :-1]
        div_p[:, 1:] -= p[1, :, :-1]
        u = x - weight * div_p
        gx = np.zeros((h, w))
        gy = np.zeros((h, w))
        gx[:-1] = u[1:] - u[:-1]
        gy[:, :-1] = u[:, 1:] - u[:, :-1]
        mag = np.sqrt(gx * gx + gy * gy)
        denom = 1.0 + (tau / weight) * mag
        p[0] = (p[0] + (tau / weight) * gx) / denom
        p[1] = (p[1] + (tau / weight) * gy) / denom
    return u


def tvm(x: np.ndarray, weight: float, iters: int) -> np.ndarray:
    """Total-variation minimization, fixed-iteration Chambolle projection.

    Minimizes 0.5*||u - x||^2 + weight*TV(u) per channel, clips to [0,1].
    Deterministic; never increases total variation.
    """
    if weight <= 0:
        raise ValueError(f"tvm weight must be positive, got {weight}")
    if iters < 1:
        raise ValueError(f"tvm iters must be >= 1, got {iters}")
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        for c in range(x.shape[1]):
            out[b, c] = _tv_channel(x[b, c].astype(np.float64), weight, iters)
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


@dataclass(frozen=True)
class BlurOp:
    """A purification guide operator.

    kind: "gaussian" (level = sigma), "median" (level = window size),
    "tvm" (level = weight, with fixed iteration count), or "identity"
    (diagnostics only).
    """

    kind: str
    level: float = 0.0
    iters: int = 30

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.level <= 0:
                raise ValueError("gaussian blur requires sigma > 0")
        elif self.kind == "median":
            k = int(self.level)
            if k != self.level or k not in _MEDIAN_WINDOWS:
                raise ValueError(f"median window must be one of {_MEDIAN_WINDOWS}")
        elif self.kind == "tvm":
            if self.level <= 0:
                raise ValueError("tvm weight must be positive")
            if self.iters < 1:
                raise ValueError("tvm iters must be >= 1")
        elif self.kind != "identity":
            raise ValueError(f"unknown blur kind {self.kind!r}")

    @property
    def differentiable(self) -> bool:
        return self.kind in ("gaussian", "identity")

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian":
            return gaussian_blur(x, self.level)
        if self.kind == "median":
            return median_filter(x, int(self.level))
        if self.kind == "tvm":
            return tvm(x, self.level, self.iters)
        return x.copy()

    def apply_tensor(self, x):
        """Differentiable application (gaussian/identity only)."""
        from . import ops

        if self.kind == "gaussian":
            return ops.gaussian_blur(x, self.level)
        if self.kind == "identity":
            return x
        raise ValueError(f"{self.kind} guide has no differentiable path")


def clip01(x: np.ndarray) -> np.ndarray:
    """Clamp into the valid pixel range [0, 1]."""
    return np.clip(x, 0.0, 1.0)


def project_linf(x: np.ndarray, center: np.ndarray, eps: float) -> np.ndarray:
    """Clamp x into the l-inf ball of radius eps around center.

    Callers wanting the combined budget-and-range projection apply this
    first and clip01 second, matching the update rules' line order.
    """
    if eps < 0:
        raise ValueError(f"projection radius must be >= 0, got {eps}")
    if x.shape != center.shape:
        raise ValueError(f"project_linf: shape mismatch {x.shape} vs {center.shape}")
    return center + np.clip(x - center, -eps, eps)


def project_l2(x: np.ndarray, center: np.ndarray, eps: float) -> np.ndarray:
    """Per-sample projection onto the l2 ball of radius eps around center."""
    if eps < 0:
        raise ValueError(f"projection radius must be >= 0, got {eps}")
    d = x - center
    flat = d.reshape(d.shape[0], -1)
    n = np.sqrt((flat * flat).sum(axis=1))
    scale = np.where(n > eps, np.where(n > 0, eps / np.maximum(n, 1e-30), 1.0), 1.0)
    return center + d * scale.reshape((-1,) + (1,) * (d.ndim - 1))
