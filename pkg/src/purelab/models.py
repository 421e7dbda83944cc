"""The victim classifier: a three-stage residual CNN with named tap points.

Six 3x3 convolutions (two per stage, widths 16/32/64), parameter-free
skip connections (2x2 average pool for downsampling plus zero channel
padding), global average pooling and a linear head. Batch statistics are
replaced by per-channel affine parameters so the gradient path is
identical in training and inference.

Tap points exposed for feature-space purification and diagnostics:

    stage1, stage2, stage3   residual-sum output of each stage (pre-activation)
    prepool                  relu(stage3), the map entering the global pool

The pooled vector is the embedding used for cosine-similarity guidance;
the linear head is the decision function on top of it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from . import ops
from .serialize import TensorFileError, read_tensors, write_tensors
from .tensor import ShapeError, Tensor

META_KEY = "__meta__"


class TinyResNet:
    TAPS = ("stage1", "stage2", "stage3", "prepool")

    def __init__(
        self,
        num_classes: int = 4,
        input_shape: tuple[int, int, int] = (3, 32, 32),
        widths: tuple[int, int, int] = (16, 32, 64),
        seed: int = 0,
        dtype=np.float32,
    ):
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.widths = tuple(widths)
        self.dtype = np.dtype(dtype).type
        self.weights: Dict[str, np.ndarray] = {}
        self._init_weights(seed)

    # -- construction -------------------------------------------------------

    def _init_weights(self, seed: int) -> None:
        rng = np.random.default_rng([seed, 271828])
        c_in = self.input_shape[0]
        for s, width in enumerate(self.widths, start=1):
            cin = c_in if s == 1 else self.widths[s - 2]
            self._he_conv(rng, f"s{s}.conv_a.w", (width, cin, 3, 3))
            self._he_conv(rng, f"s{s}.conv_b.w", (width, width, 3, 3))
            for blk in ("a", "b"):
                self.weights[f"s{s}.aff_{blk}.gamma"] = np.ones(width, dtype=self.dtype)
                self.weights[f"s{s}.aff_{blk}.beta"] = np.zeros(width, dtype=self.dtype)
        d = self.widths[-1]
        self.weights["head.w"] = (
            rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, self.num_classes))
        ).astype(self.dtype)
        self.weights["head.b"] = np.zeros(self.num_classes, dtype=self.dtype)

    def _he_conv(self, rng, name: str, shape) -> None:
        fan_in = shape[1] * shape[2] * shape[3]
        self.weights[name] = (
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(self.dtype)
        )

    def astype(self, dtype) -> "TinyResNet":
        clone = TinyResNet.__new__(TinyResNet)
        clone.num_classes = self.num_classes
        clone.input_shape = self.input_shape
        clone.widths = self.widths
        clone.dtype = np.dtype(dtype).type
        clone.weights = {k: v.astype(clone.dtype) for k, v in self.weights.items()}
        return clone

    def param_tensors(self, requires_grad: bool = True) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.weights.items()}

    # -- forward ------------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.data.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {x.data.shape} does not match (B,)+{self.input_shape}"
            )
        if x.data.dtype != np.dtype(self.dtype):
            raise ShapeError(
                f"input dtype {x.data.dtype} does not match model dtype {np.dtype(self.dtype)}"
            )

    def _stage(self, x: Tensor, s: int, p: Dict[str, Tensor]) -> Tensor:
        stride = 1 if s == 1 else 2
        h = ops.conv2d(x, p[f"s{s}.conv_a.w"], stride=stride, pad=1)
        h = ops.channel_affine(h, p[f"s{s}.aff_a.gamma"], p[f"s{s}.aff_a.beta"])
        h = ops.relu(h)
        h = ops.conv2d(h, p[f"s{s}.conv_b.w"], stride=1, pad=1)
        h = ops.channel_affine(h, p[f"s{s}.aff_b.gamma"], p[f"s{s}.aff_b.beta"])
        skip = x if stride == 1 else ops.avg_pool2d(x, 2, 2)
        if skip.data.shape[1] != h.data.shape[1]:
            skip = ops.pad_channels(skip, h.data.shape[1])
        return ops.add(h, skip)

    def forward_full(
        self,
        x: Tensor,
        taps: Sequence[str] = (),
        params: Optional[Dict[str, Tensor]] = None,
    ):
        """One pass computing logits, the pooled embedding and requested taps."""
        x = ops.as_tensor(x)
        self._check_input(x)
        for t in taps:
            if t not in self.TAPS:
                raise KeyError(f"unknown tap {t!r}; taps are {self.TAPS}")
        p = params if params is not None else self.param_tensors(requires_grad=False)
        tapped: Dict[str, Tensor] = {}
        h = x
        for s in range(1, 4):
            ssum = self._stage(h, s, p)
            name = f"stage{s}"
            if name in taps:
                tapped[name] = ssum
            h = ops.relu(ssum)
        if "prepool" in taps:
            tapped["prepool"] = h
        pooled = ops.mean(h, axis=(2, 3))
        logits = ops.linear(pooled, p["head.w"], p["head.b"])
        return logits, pooled, tapped

    def forward_with_taps(self, x, taps: Sequence[str] = (), params=None):
        logits, _, tapped = self.forward_full(x, taps, params)
        return logits, tapped

    def logits(self, x) -> Tensor:
        return self.forward_full(x)[0]

    def embed(self, x) -> Tensor:
        """Pooled embedding vector, the input to the decision head."""
        return self.forward_full(x)[1]

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Class ids for a plain image batch, computed without a tape."""
        out = np.empty(images.shape[0], dtype=np.int64)
        for s in range(0, images.shape[0], batch_size):
            chunk = images[s : s + batch_size].astype(self.dtype, copy=False)
            out[s : s + batch_size] = np.argmax(self.logits(Tensor(chunk)).data, axis=1)
        return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_weights(model: TinyResNet, path) -> None:
    meta = np.array(
        [model.num_classes, *model.input_shape, *model.widths], dtype=np.float32
    )
    tensors = {META_KEY: meta}
    tensors.update(model.weights)
    write_tensors(path, tensors)


def load_weights(path) -> TinyResNet:
    tensors = read_tensors(path)
    if META_KEY not in tensors:
        raise TensorFileError(f"missing {META_KEY} tensor")
    meta = tensors.pop(META_KEY).astype(np.int64)
    if meta.shape != (7,):
        raise TensorFileError(f"malformed {META_KEY} tensor of shape {meta.shape}")
    model = TinyResNet(
        num_classes=int(meta[0]),
        input_shape=tuple(int(v) for v in meta[1:4]),
        widths=tuple(int(v) for v in meta[4:7]),
    )
    for name, arr in model.weights.items():
        if name not in tensors:
            raise TensorFileError(f"missing weight tensor {name!r}")
        if tensors[name].shape != arr.shape:
            raise TensorFileError(
                f"shape mismatch for {name!r}: file {tensors[name].shape}, "
                f"model {arr.shape}"
            )
        model.weights[name] = np.ascontiguousarray(tensors[name], dtype=model.dtype)
    return model


# ---------------------------------------------------------------------------
# layer-deviation diagnostic
# ---------------------------------------------------------------------------


@dataclass
class DeviationProfile:
    """Per-tap perturbation amplification measurements (per sample).

    ``deviation_norms[t]`` is ||f_t(x+d) - f_t(x)||_2, ``first_order_norms``
    the norm of the directional-derivative prediction, ``remainder_norms``
    the norm of their difference (the higher-order remainder).
    """

    taps: tuple
    deviation_norms: Dict[str, np.ndarray] = field(default_factory=dict)
    first_order_norms: Dict[str, np.ndarray] = field(default_factory=dict)
    remainder_norms: Dict[str, np.ndarray] = field(default_factory=dict)


def _tap_arrays(model: TinyResNet, x: np.ndarray, taps) -> Dict[str, np.ndarray]:
    _, tapped = model.forward_with_taps(Tensor(x.astype(model.dtype, copy=False)), taps)
    return {k: v.data for k, v in tapped.items()}


def _rownorm(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(a.shape[0], -1) ** 2).sum(axis=1))


def layer_deviation(
    model: TinyResNet,
    x: np.ndarray,
    delta: np.ndarray,
    taps: Optional[Iterable[str]] = None,
    jvp_step: float = 1e-3,
) -> DeviationProfile:
    """Measure how a perturbation is amplified layer by layer.

    For each tap t the profile records the exact deviation
    f_t(x+delta) - f_t(x), the first-order directional prediction
    (computed by central differences with step ``jvp_step`` along delta),
    and the remainder between the two. Run it on a float64 model when the
    remainder itself is the quantity of interest.
    """
    taps = tuple(taps) if taps is not None else model.TAPS
    if x.shape != delta.shape:
        raise ShapeError("layer_deviation: delta shape must match x")
    base = _tap_arrays(model, x, taps)
    shifted = _tap_arrays(model, x + delta, taps)
    jp = _tap_arrays(model, x + jvp_step * delta, taps)
    jm = _tap_arrays(model, x - jvp_step * delta, taps)
    profile = DeviationProfile(taps=taps)
    for t in taps:
        dev = shifted[t] - base[t]
        jvp = (jp[t] - jm[t]) / (2.0 * jvp_step)
        profile.deviation_norms[t] = _rownorm(dev)
        profile.first_order_norms[t] = _rownorm(jvp)
        profile.remainder_norms[t] = _rownorm(dev - jvp)
    return profile
