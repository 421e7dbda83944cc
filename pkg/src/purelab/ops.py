"""Differentiable operation suite.

Every public function takes/returns :class:`~purelab.tensor.Tensor` and
registers an exact backward closure via ``make_result``. Subgradient
conventions: relu routes 0 at the kink, max-pool routes to the first
maximal window index, sign-of-zero style guards (sqrt at 0, norms at 0)
return 0.

Binary elementwise ops require identical shapes; scalar interaction goes
through ``sadd``/``smul``. There is no implicit broadcasting — reshape
explicitly.
"""
from __future__ import annotations

import logging

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, make_result

log = logging.getLogger(__name__)

_NORM_EPS = 1e-12
_warned_zero_channel = False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return make_result(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return make_result(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return make_result(a.data * b.data, (a, b), "mul", bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * out / b.data)

    return make_result(out, (a, b), "div", bw)


def sadd(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g)

    return make_result(a.data + a.data.dtype.type(c), (a,), "sadd", bw)


def smul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    cc = a.data.dtype.type(c)

    def bw(g):
        a._accumulate(g * cc)

    return make_result(a.data * cc, (a,), "smul", bw)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        a._accumulate(g * mask)

    return make_result(np.where(mask, a.data, 0), (a,), "relu", bw)


def sqrt_(a: Tensor) -> Tensor:
    """Elementwise square root with zero subgradient at 0."""
    a = as_tensor(a)
    if (a.data < 0).any():
        raise ShapeError("sqrt: negative input")
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > _NORM_EPS, out, 1.0)
        a._accumulate(np.where(out > _NORM_EPS, 0.5 * g / safe, 0.0))

    return make_result(out, (a,), "sqrt", bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return make_result(a.data @ b.data, (a, b), "matmul", bw)


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError("dot expects vectors")
    _same_shape(a, b, "dot")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return make_result(np.asarray(a.data @ b.data), (a, b), "dot", bw)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of a batch of rows: ``x (B,n) @ w (n,m) + bias (m,)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} @ {w.data.shape}")
    out = x.data @ w.data
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (w.data.shape[1],):
            raise ShapeError("linear: bias shape mismatch")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return make_result(out, parents, "linear", bw)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects (B,C,H,W) input and (O,C,KH,KW) weight")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d: channel mismatch {x.data.shape} vs {w.data.shape}"
        )
    if x.data.dtype != w.data.dtype:
        raise ShapeError("conv2d: dtype mismatch between input and weight")
    b_, c_, h, wd = x.data.shape
    kh, kw = w.data.shape[2], w.data.shape[3]
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    out = kernels.conv2d_forward(x.data, w.data, stride, pad)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (w.data.shape[0],):
            raise ShapeError("conv2d: bias shape mismatch")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accumulate(kernels.conv2d_backward_input(g, w.data, stride, pad, h, wd))
        if w.requires_grad:
            w._accumulate(kernels.conv2d_backward_weight(g, x.data, stride, pad, kh, kw))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return make_result(out, parents, "conv2d", bw)


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = k if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d expects (B,C,H,W)")
    if x.data.shape[2] < k or x.data.shape[3] < k:
        raise ShapeError("max_pool2d: window larger than input")
    out, arg = kernels.maxpool2d_forward(x.data, k, stride)
    shape = x.data.shape

    def bw(g):
        x._accumulate(kernels.maxpool2d_backward(np.ascontiguousarray(g), arg, shape, k, stride))

    return make_result(out, (x,), "max_pool2d", bw)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = k if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError("avg_pool2d expects (B,C,H,W)")
    if x.data.shape[2] < k or x.data.shape[3] < k:
        raise ShapeError("avg_pool2d: window larger than input")
    out = kernels.avgpool2d_forward(x.data, k, stride)
    shape = x.data.shape

    def bw(g):
        x._accumulate(kernels.avgpool2d_backward(np.ascontiguousarray(g), shape, k, stride))

    return make_result(out, (x,), "avg_pool2d", bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    out = x.data.reshape(shape)

    def bw(g):
        x._accumulate(g.reshape(old))

    return make_result(out, (x,), "reshape", bw)


def flatten(x: Tensor, start_axis: int = 1) -> Tensor:
    x = as_tensor(x)
    lead = x.data.shape[:start_axis]
    return reshape(x, lead + (-1,))


def pad_channels(x: Tensor, c_out: int) -> Tensor:
    """Append zero channels so a (B,C,H,W) map has ``c_out`` channels."""
    x = as_tensor(x)
    b, c, h, w = x.data.shape
    if c_out < c:
        raise ShapeError(f"pad_channels: {c_out} < existing {c}")
    out = np.zeros((b, c_out, h, w), dtype=x.data.dtype)
    out[:, :c] = x.data

    def bw(g):
        x._accumulate(g[:, :c])

    return make_result(out, (x,), "pad_channels", bw)


def pad_zero2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    x = as_tensor(x)
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    h, w = x.data.shape[2], x.data.shape[3]

    def bw(g):
        x._accumulate(g[:, :, top : top + h, left : left + w])

    return make_result(out, (x,), "pad_zero2d", bw)


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    idx = np.where(idx >= n, 2 * n - 2 - idx, idx)
    return idx


def _fold_axis2(g: np.ndarray, idx: np.ndarray, size: int, axis: int) -> np.ndarray:
    """Adjoint of gather-along-axis: scatter-add g rows back to their sources."""
    gm = np.moveaxis(g, axis, 0)
    out = np.zeros((size,) + gm.shape[1:], dtype=g.dtype)
    np.add.at(out, idx, gm)
    return np.moveaxis(out, 0, axis)


def pad_reflect2d(x: Tensor, ph: int, pw: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("pad_reflect2d expects (B,C,H,W)")
    h, w = x.data.shape[2], x.data.shape[3]
    if ph >= h or pw >= w:
        raise ShapeError("pad_reflect2d: pad must be smaller than the image")
    ih = _reflect_index(h, ph)
    iw = _reflect_index(w, pw)
    out = x.data[:, :, ih][:, :, :, iw]

    def bw(g):
        g = _fold_axis2(g, iw, w, 3)
        g = _fold_axis2(g, ih, h, 2)
        x._accumulate(g)

    return make_result(np.ascontiguousarray(out), (x,), "pad_reflect2d", bw)


def resize_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("resize_nearest expects (B,C,H,W)")
    h, w = x.data.shape[2], x.data.shape[3]
    ih = np.minimum((np.arange(out_h) * h // out_h), h - 1)
    iw = np.minimum((np.arange(out_w) * w // out_w), w - 1)
    out = x.data[:, :, ih][:, :, :, iw]

    def bw(g):
        g = _fold_axis2(g, iw, w, 3)
        g = _fold_axis2(g, ih, h, 2)
        x._accumulate(g)

    return make_result(np.ascontiguousarray(out), (x,), "resize_nearest", bw)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift, the stats-free stand-in for batch norm."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("channel_affine: parameter shape mismatch")
    gm = gamma.data[None, :, None, None]
    out = x.data * gm + beta.data[None, :, None, None]

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * gm)
        if gamma.requires_grad:
            gamma._accumulate((g * x.data).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))

    return make_result(out, (x, gamma, beta), "channel_affine", bw)


# ---------------------------------------------------------------------------
# reductions and norms
# ---------------------------------------------------------------------------


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(1 if i in axes or (i - len(shape)) in axes else s for i, s in enumerate(shape))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    kshape = _keepdims_shape(x.data.shape, axis)
    xshape = x.data.shape

    def bw(g):
        x._accumulate(np.broadcast_to(g.reshape(kshape), xshape))

    return make_result(np.asarray(out), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    kshape = _keepdims_shape(x.data.shape, axis)
    xshape = x.data.shape
    count = x.data.size / np.prod(out.shape) if out.size else x.data.size
    inv = x.data.dtype.type(1.0 / count)

    def bw(g):
        x._accumulate(np.broadcast_to((g * inv).reshape(kshape), xshape))

    return make_result(np.asarray(out), (x,), "mean", bw)


def l2_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over ``axis`` with zero subgradient at the origin."""
    x = as_tensor(x)
    sq = (x.data * x.data).sum(axis=axis, keepdims=True)
    n = np.sqrt(sq)
    kshape = n.shape

    def bw(g):
        gb = np.broadcast_to(g.reshape(kshape), kshape)
        safe = np.where(n > _NORM_EPS, n, 1.0)
        x._accumulate(np.where(n > _NORM_EPS, gb / safe, 0.0) * x.data)

    out = n if keepdims else n.reshape(_drop_axes(n.shape, axis))
    return make_result(np.asarray(out), (x,), "l2_norm", bw)


def _drop_axes(shape, axis):
    if axis is None:
        return ()
    axes = {(a if a >= 0 else a + len(shape)) for a in ((axis,) if isinstance(axis, int) else axis)}
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def channel_normalize(x: Tensor) -> Tensor:
    """Unit-l2 channel vectors at every (b, h, w) location.

    Locations whose channel norm is below 1e-12 map to zero (logged once)
    and pass zero gradient.
    """
    global _warned_zero_channel
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("channel_normalize expects (B,C,H,W)")
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    guarded = n <= _NORM_EPS
    if guarded.any() and not _warned_zero_channel:
        log.warning("channel_normalize: zero-norm channel vectors mapped to 0")
        _warned_zero_channel = True
    safe = np.where(guarded, 1.0, n)
    out = np.where(guarded, 0.0, x.data / safe)

    def bw(g):
        dotgx = (g * x.data).sum(axis=1, keepdims=True)
        gx = g / safe - x.data * (dotgx / (safe * safe * safe))
        x._accumulate(np.where(guarded, 0.0, gx))

    return make_result(out.astype(x.data.dtype), (x,), "channel_normalize", bw)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return make_result(s, (x,), "softmax", bw)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return make_result(out, (x,), "log_softmax", bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over a batch of logits (B, K)."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects (B, K) logits")
    labels = np.asarray(labels)
    b, k = logits.data.shape
    if labels.shape != (b,):
        raise ShapeError("cross_entropy: labels shape mismatch")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError("cross_entropy: label out of range")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(b), labels].mean()
    soft = np.exp(logp)

    def bw(g):
        gx = soft.copy()
        gx[np.arange(b), labels] -= 1.0
        logits._accumulate(gx * (g / b))

    return make_result(np.asarray(loss, dtype=logits.data.dtype), (logits,), "cross_entropy", bw)


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (B, n) matrices -> (B,).

    Rows with norm below 1e-12 are an error ("degenerate embedding").
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("cosine_rows expects (B, n) matrices")
    _same_shape(a, b, "cosine_rows")
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    if (na < _NORM_EPS).any() or (nb < _NORM_EPS).any():
        raise ArithmeticError("degenerate embedding: zero-norm vector in cosine")
    d = (a.data * b.data).sum(axis=1) / (na * nb)

    def bw(g):
        if a.requires_grad:
            ga = b.data / (na * nb)[:, None] - a.data * (d / (na * na))[:, None]
            a._accumulate(ga * g[:, None])
        if b.requires_grad:
            gb = a.data / (na * nb)[:, None] - b.data * (d / (nb * nb))[:, None]
            b._accumulate(gb * g[:, None])

    return make_result(d, (a, b), "cosine_rows", bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors as a differentiable scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError("cosine_similarity expects vectors")
    _same_shape(a, b, "cosine_similarity")
    rows = cosine_rows(reshape(a, (1, -1)), reshape(b, (1, -1)))
    return reshape(rows, ())


# ---------------------------------------------------------------------------
# differentiable gaussian blur (exact-gradient guide branch)
# ---------------------------------------------------------------------------


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Separable gaussian blur with reflect padding, exact gradient.

    Composed from pad_reflect2d and depthwise 1-d convolutions, so the
    backward pass is the true adjoint. Values stay inside the input range
    because the kernel is a convex combination.
    """
    from .imageops import gaussian_kernel1d

    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("gaussian_blur expects (B,C,H,W)")
    k = gaussian_kernel1d(sigma).astype(x.data.dtype)
    r = len(k) // 2
    b, c, h, w = x.data.shape
    kv = Tensor(k.reshape(1, 1, -1, 1))
    kh = Tensor(k.reshape(1, 1, 1, -1))
    flat = reshape(x, (b * c, 1, h, w))
    padded = pad_reflect2d(flat, r, r)
    blurred = conv2d(conv2d(padded, kv), kh)
    return reshape(blurred, (b, c, h, w))
