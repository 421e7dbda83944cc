"""Finite-difference verification of every registered op's backward pass.

``grad_check`` compares a tape gradient against central differences,
elementwise, and reports the worst relative error (relative to the larger
entry of each pair, floored at 1% of the gradient's max magnitude so that
near-zero entries do not dominate).

``run_suite`` exercises each op at kink-free points: relu inputs are kept
away from 0, pooling windows hold values separated by more than the
difference step, norms stay away from the origin.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .tensor import Tensor

F32_THRESHOLD = 1e-3
F64_THRESHOLD = 1e-5


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    gmax = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if gmax == 0.0:
        return float(np.abs(a - b).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 0.01 * gmax)
    return float((np.abs(a - b) / denom).max())


def _tape_gradient(f: Callable[[Tensor], Tensor], base: np.ndarray) -> np.ndarray:
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    return np.zeros_like(base) if xt.grad is None else xt.grad


def _fd_gradient(f: Callable[[Tensor], Tensor], base: np.ndarray, h: float) -> np.ndarray:
    fd = np.empty(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * h)
    return fd.reshape(base.shape)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> float:
    """Worst relative error between the tape gradient of f and central FD.

    ``f`` maps a tensor to a scalar tensor and must be smooth at ``x``
    (callers avoid relu kinks and pooling ties by nudging inputs).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x)
    analytic = _tape_gradient(f, base)
    fd = _fd_gradient(f, base, h)
    return relative_error(analytic.reshape(-1), fd.reshape(-1))


# ---------------------------------------------------------------------------
# per-op check suite
# ---------------------------------------------------------------------------


def _wsum(rng, shape, dtype):
    w = Tensor(rng.uniform(-1, 1, size=shape).astype(dtype))

    def reduce(y):
        return ops.sum_(ops.mul(y, w))

    return reduce


def _away_from_zero(a, margin):
    return a + np.sign(a) * margin + (a == 0) * margin


def _spaced_values(rng, shape, spacing, dtype):
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) * spacing
    return vals.reshape(shape).astype(dtype)


def _unit_safe_channels(rng, shape, dtype):
    x = rng.normal(size=shape)
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    x = x * np.maximum(0.5 / np.maximum(n, 1e-9), 1.0)
    return x.astype(dtype)


def _build_checks(rng: np.random.Generator, dtype):
    u = lambda *s: rng.uniform(-1, 1, size=s).astype(dtype)
    checks = {}

    b = Tensor(u(4, 5))
    checks["add"] = (_chain(_wsum(rng, (4, 5), dtype), lambda t: ops.add(t, b)), u(4, 5))
    checks["sub"] = (_chain(_wsum(rng, (4, 5), dtype), lambda t: ops.sub(t, b)), u(4, 5))
    checks["mul"] = (_chain(_wsum(rng, (4, 5), dtype), lambda t: ops.mul(t, b)), u(4, 5))
    bdiv = Tensor(_away_from_zero(u(4, 5), 0.5))
    checks["div"] = (_chain(_wsum(rng, (4, 5), dtype), lambda t: ops.div(t, bdiv)), u(4, 5))
    checks["sadd"] = (_chain(_wsum(rng, (4, 5), dtype), lambda t: ops.sadd(t, 0.7)), u(4, 5))
    checks["smul"] = (_chain(_wsum(rng, (4, 5), dtype), lambda t: ops.smul(t, -1.3)), u(4, 5))
    checks["relu"] = (
        _chain(_wsum(rng, (4, 5), dtype), ops.relu),
        _away_from_zero(u(4, 5), 0.1),
    )
    checks["sqrt"] = (
        _chain(_wsum(rng, (4, 5), dtype), ops.sqrt_),
        rng.uniform(0.5, 2.0, size=(4, 5)).astype(dtype),
    )

    w_mm = Tensor(u(3, 5))
    checks["matmul"] = (_chain(_wsum(rng, (4, 5), dtype), lambda t: ops.matmul(t, w_mm)), u(4, 3))
    vec = Tensor(u(7))
    checks["dot"] = (lambda t: ops.dot(t, vec), u(7))
    w_lin, b_lin = Tensor(u(4, 5)), Tensor(u(5))
    checks["linear"] = (
        _chain(_wsum(rng, (3, 5), dtype), lambda t: ops.linear(t, w_lin, b_lin)),
        u(3, 4),
    )
    x_lin = Tensor(u(3, 4))
    checks["linear_weight"] = (
        _chain(_wsum(rng, (3, 5), dtype), lambda t: ops.linear(x_lin, t, b_lin)),
        u(4, 5),
    )

    w_c = Tensor(u(4, 3, 3, 3))
    bias_c = Tensor(u(4))
    checks["conv2d"] = (
        _chain(_wsum(rng, (1, 4, 8, 8), dtype), lambda t: ops.conv2d(t, w_c, bias_c, stride=1, pad=1)),
        u(1, 3, 8, 8),
    )
    checks["conv2d_stride2"] = (
        _chain(_wsum(rng, (1, 4, 4, 4), dtype), lambda t: ops.conv2d(t, w_c, None, stride=2, pad=1)),
        u(1, 3, 8, 8),
    )
    x_c = Tensor(u(2, 3, 6, 6))
    checks["conv2d_weight"] = (
        _chain(_wsum(rng, (2, 4, 6, 6), dtype), lambda t: ops.conv2d(x_c, t, None, stride=1, pad=1)),
        u(4, 3, 3, 3),
    )

    checks["max_pool2d"] = (
        _chain(_wsum(rng, (1, 2, 3, 3), dtype), lambda t: ops.max_pool2d(t, 2, 2)),
        _spaced_values(rng, (1, 2, 6, 6), 0.05, dtype),
    )
    checks["avg_pool2d"] = (
        _chain(_wsum(rng, (1, 2, 3, 3), dtype), lambda t: ops.avg_pool2d(t, 2, 2)),
        u(1, 2, 6, 6),
    )

    checks["flatten"] = (_chain(_wsum(rng, (2, 12), dtype), ops.flatten), u(2, 3, 2, 2))
    checks["softmax"] = (_chain(_wsum(rng, (3, 7), dtype), ops.softmax), u(3, 7))
    checks["log_softmax"] = (_chain(_wsum(rng, (3, 7), dtype), ops.log_softmax), u(3, 7))
    labels = rng.integers(0, 5, size=4)
    checks["cross_entropy"] = (lambda t: ops.cross_entropy(t, labels), u(4, 5))

    checks["sum"] = (_chain(_wsum(rng, (4,), dtype), lambda t: ops.sum_(t, axis=1)), u(4, 6))
    checks["mean"] = (_chain(_wsum(rng, (6,), dtype), lambda t: ops.mean(t, axis=0)), u(4, 6))
    checks["l2_norm"] = (
        _chain(_wsum(rng, (4,), dtype), lambda t: ops.l2_norm(t, axis=1)),
        _away_from_zero(u(4, 6), 0.2),
    )
    checks["channel_normalize"] = (
        _chain(_wsum(rng, (2, 4, 3, 3), dtype), ops.channel_normalize),
        _unit_safe_channels(rng, (2, 4, 3, 3), dtype),
    )
    gamma, beta = Tensor(u(3)), Tensor(u(3))
    checks["channel_affine"] = (
        _chain(_wsum(rng, (2, 3, 4, 4), dtype), lambda t: ops.channel_affine(t, gamma, beta)),
        u(2, 3, 4, 4),
    )
    x_ca = Tensor(u(2, 3, 4, 4))
    checks["channel_affine_gamma"] = (
        _chain(_wsum(rng, (2, 3, 4, 4), dtype), lambda t: ops.channel_affine(x_ca, t, beta)),
        u(3),
    )

    cos_b = Tensor(_away_from_zero(u(3, 6), 0.2))
    checks["cosine_rows"] = (
        _chain(_wsum(rng, (3,), dtype), lambda t: ops.cosine_rows(t, cos_b)),
        _away_from_zero(u(3, 6), 0.2),
    )
    cos_v = Tensor(_away_from_zero(u(8), 0.2))
    checks["cosine_similarity"] = (
        lambda t: ops.cosine_similarity(t, cos_v),
        _away_from_zero(u(8), 0.2),
    )

    checks["pad_reflect2d"] = (
        _chain(_wsum(rng, (1, 2, 9, 9), dtype), lambda t: ops.pad_reflect2d(t, 2, 2)),
        u(1, 2, 5, 5),
    )
    checks["pad_zero2d"] = (
        _chain(_wsum(rng, (1, 2, 8, 7), dtype), lambda t: ops.pad_zero2d(t, 1, 2, 1, 1)),
        u(1, 2, 5, 5),
    )
    checks["pad_channels"] = (
        _chain(_wsum(rng, (1, 5, 4, 4), dtype), lambda t: ops.pad_channels(t, 5)),
        u(1, 2, 4, 4),
    )
    checks["resize_nearest"] = (
        _chain(_wsum(rng, (1, 2, 5, 5), dtype), lambda t: ops.resize_nearest(t, 5, 5)),
        u(1, 2, 8, 8),
    )
    checks["gaussian_blur"] = (
        _chain(_wsum(rng, (1, 2, 8, 8), dtype), lambda t: ops.gaussian_blur(t, 1.2)),
        rng.uniform(0.1, 0.9, size=(1, 2, 8, 8)).astype(dtype),
    )
    return checks


def _chain(reduce, op):
    return lambda t: reduce(op(t))


def step_for(dtype) -> float:
    return 1e-3 if np.dtype(dtype) == np.dtype(np.float32) else 1e-5


def threshold_for(dtype) -> float:
    return F32_THRESHOLD if np.dtype(dtype) == np.dtype(np.float32) else F64_THRESHOLD


def run_suite(dtype=np.float32, seeds=range(10)) -> dict[str, float]:
    """Worst gradient error per op across the given seeds.

    The tape gradient runs at ``dtype``; the finite-difference oracle
    always runs in float64 (on an identically-seeded twin of each check)
    so that oracle noise never masks a backward-formula defect.
    """
    dtype = np.dtype(dtype).type
    h = step_for(dtype)
    worst: dict[str, float] = {}
    for seed in seeds:
        checks = _build_checks(np.random.default_rng([314159, seed]), dtype)
        oracle = _build_checks(np.random.default_rng([314159, seed]), np.float64)
        for name, (fn, x0) in checks.items():
            analytic = _tape_gradient(fn, x0)
            fd = _fd_gradient(oracle[name][0], x0.astype(np.float64), h)
            err = relative_error(analytic.reshape(-1), fd.reshape(-1))
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
