"""Hot numeric kernels with numba and pure-numpy implementations.

Each kernel exists twice: ``<name>_numpy`` (vectorised numpy, always
available) and ``<name>_numba`` (loop nests compiled with ``@njit``,
present only when numba imports). The unsuffixed public names are bound
to the flavour picked by :mod:`purelab.backend`.

Layout conventions: images and feature maps are ``(B, C, H, W)`` arrays,
convolution weights are ``(O, C, KH, KW)``. Padding is zero-fill for
convolution/pooling; the median filter reflect-pads.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .backend import BACKEND, NUMBA_AVAILABLE

# ---------------------------------------------------------------------------
# pure-numpy flavour
# ---------------------------------------------------------------------------


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward_numpy(x, w, stride, pad):
    xp = _pad_hw(x, pad)
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, OH, OW, KH, KW); contract C, KH, KW against w
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input_numpy(gout, w, stride, pad, height, width):
    b, o, oh, ow = gout.shape
    c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    gxp = np.zeros((b, c, height + 2 * pad, width + 2 * pad), dtype=gout.dtype)
    # cols[b, oh, ow, c, i, j] = sum_o gout[b,o,oh,ow] * w[o,c,i,j]
    cols = np.tensordot(gout, w, axes=([1], [0]))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        gxp = gxp[:, :, pad : pad + height, pad : pad + width]
    return np.ascontiguousarray(gxp)


def conv2d_backward_weight_numpy(gout, x, stride, pad, kh, kw):
    xp = _pad_hw(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # contract B, OH, OW between gout (B,O,OH,OW) and win (B,C,OH,OW,KH,KW)
    gw = np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(gw)


def maxpool2d_forward_numpy(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    flat = win.reshape(b, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1).astype(np.int64)  # first maximal index on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2d_backward_numpy(gout, arg, x_shape, k, stride):
    b, c, h, w = x_shape
    oh, ow = gout.shape[2], gout.shape[3]
    gx = np.zeros(x_shape, dtype=gout.dtype)
    ohs = np.arange(oh) * stride
    ows = np.arange(ow) * stride
    hh = ohs[None, None, :, None] + arg // k
    ww = ows[None, None, None, :] + arg % k
    bb = np.arange(b)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gx, (bb, cc, hh, ww), gout)
    return gx


def avgpool2d_forward_numpy(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.mean(axis=(4, 5), dtype=x.dtype))


def avgpool2d_backward_numpy(gout, x_shape, k, stride):
    gx = np.zeros(x_shape, dtype=gout.dtype)
    oh, ow = gout.shape[2], gout.shape[3]
    share = gout / (k * k)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += share
    return gx


def median_filter2d_numpy(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    out = np.empty_like(x)
    # chunk over the batch to bound the materialised window buffer
    step = max(1, int(2**24 // max(1, x[0].size * k * k)))
    for s in range(0, x.shape[0], step):
        win = sliding_window_view(xp[s : s + step], (k, k), axis=(2, 3))
        out[s : s + step] = np.median(win, axis=(4, 5))
    return out


_NUMPY_KERNELS = {
    "conv2d_forward": conv2d_forward_numpy,
    "conv2d_backward_input": conv2d_backward_input_numpy,
    "conv2d_backward_weight": conv2d_backward_weight_numpy,
    "maxpool2d_forward": maxpool2d_forward_numpy,
    "maxpool2d_backward": maxpool2d_backward_numpy,
    "avgpool2d_forward": avgpool2d_forward_numpy,
    "avgpool2d_backward": avgpool2d_backward_numpy,
    "median_filter2d": median_filter2d_numpy,
}

# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:
    from numba import njit, prange

    @njit(cache=True, parallel=True)
    def conv2d_forward_numba(x, w, stride, pad):
        b_n, c_n, h, wd = x.shape
        o_n, _, kh, kw = w.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (wd + 2 * pad - kw) // stride + 1
        out = np.zeros((b_n, o_n, oh, ow), dtype=x.dtype)
        for b in prange(b_n):
            for o in range(o_n):
                for y in range(oh):
                    ih0 = y * stride - pad
                    for z in range(ow):
                        iw0 = z * stride - pad
                        acc = 0.0
                        for c in range(c_n):
                            for i in range(kh):
                                ih = ih0 + i
                                if ih < 0 or ih >= h:
                                    continue
                                for j in range(kw):
                                    iw = iw0 + j
                                    if iw < 0 or iw >= wd:
                                        continue
                                    acc += x[b, c, ih, iw] * w[o, c, i, j]
                        out[b, o, y, z] = acc
        return out

    @njit(cache=True, parallel=True)
    def conv2d_backward_input_numba(gout, w, stride, pad, height, width):
        b_n, o_n, oh, ow = gout.shape
        c_n, kh, kw = w.shape[1], w.shape[2], w.shape[3]
        gx = np.zeros((b_n, c_n, height, width), dtype=gout.dtype)
        for b in prange(b_n):
            for o in range(o_n):
                for y in range(oh):
                    ih0 = y * stride - pad
                    for z in range(ow):
                        iw0 = z * stride - pad
                        g = gout[b, o, y, z]
                        for c in range(c_n):
                            for i in range(kh):
                                ih = ih0 + i
                                if ih < 0 or ih >= height:
                                    continue
                                for j in range(kw):
                                    iw = iw0 + j
                                    if iw < 0 or iw >= width:
                                        continue
                                    gx[b, c, ih, iw] += g * w[o, c, i, j]
        return gx

    @njit(cache=True, parallel=True)
    def conv2d_backward_weight_numba(gout, x, stride, pad, kh, kw):
        b_n, o_n, oh, ow = gout.shape
        c_n, h, wd = x.shape[1], x.shape[2], x.shape[3]
        gw = np.zeros((o_n, c_n, kh, kw), dtype=gout.dtype)
        for o in prange(o_n):
            for b in range(b_n):
                for y in range(oh):
                    ih0 = y * stride - pad
                    for z in range(ow):
                        iw0 = z * stride - pad
                        g = gout[b, o, y, z]
                        for c in range(c_n):
                            for i in range(kh):
                                ih = ih0 + i
                                if ih < 0 or ih >= h:
                                    continue
                                for j in range(kw):
                                    iw = iw0 + j
                                    if iw < 0 or iw >= wd:
                                        continue
                                    gw[o, c, i, j] += g * x[b, c, ih, iw]
        return gw

    @njit(cache=True, parallel=True)
    def _maxpool2d_forward_numba(x, k, stride):
        b_n, c_n, h, wd = x.shape
        oh = (h - k) // stride + 1
        ow = (wd - k) // stride + 1
        out = np.empty((b_n, c_n, oh, ow), dtype=x.dtype)
        arg = np.empty((b_n, c_n, oh, ow), dtype=np.int64)
        for b in prange(b_n):
            for c in range(c_n):
                for y in range(oh):
                    for z in range(ow):
                        best = x[b, c, y * stride, z * stride]
                        besti = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, c, y * stride + i, z * stride + j]
                                if v > best:  # strict: first maximum wins ties
                                    best = v
                                    besti = i * k + j
                        out[b, c, y, z] = best
                        arg[b, c, y, z] = besti
        return out, arg

    def maxpool2d_forward_numba(x, k, stride):
        return _maxpool2d_forward_numba(x, k, stride)

    @njit(cache=True, parallel=True)
    def _maxpool2d_backward_numba(gout, arg, h, wd, k, stride):
        b_n, c_n, oh, ow = gout.shape
        gx = np.zeros((b_n, c_n, h, wd), dtype=gout.dtype)
        for b in prange(b_n):
            for c in range(c_n):
                for y in range(oh):
                    for z in range(ow):
                        a = arg[b, c, y, z]
                        gx[b, c, y * stride + a // k, z * stride + a % k] += gout[
                            b, c, y, z
                        ]
        return gx

    def maxpool2d_backward_numba(gout, arg, x_shape, k, stride):
        return _maxpool2d_backward_numba(gout, arg, x_shape[2], x_shape[3], k, stride)

    @njit(cache=True, parallel=True)
    def avgpool2d_forward_numba(x, k, stride):
        b_n, c_n, h, wd = x.shape
        oh = (h - k) // stride + 1
        ow = (wd - k) // stride + 1
        out = np.empty((b_n, c_n, oh, ow), dtype=x.dtype)
        inv = 1.0 / (k * k)
        for b in prange(b_n):
            for c in range(c_n):
                for y in range(oh):
                    for z in range(ow):
                        acc = 0.0
                        for i in range(k):
                            for j in range(k):
                                acc += x[b, c, y * stride + i, z * stride + j]
                        out[b, c, y, z] = acc * inv
        return out

    @njit(cache=True, parallel=True)
    def _avgpool2d_backward_numba(gout, h, wd, k, stride):
        b_n, c_n, oh, ow = gout.shape
        gx = np.zeros((b_n, c_n, h, wd), dtype=gout.dtype)
        inv = 1.0 / (k * k)
        for b in prange(b_n):
            for c in range(c_n):
                for y in range(oh):
                    for z in range(ow):
                        g = gout[b, c, y, z] * inv
                        for i in range(k):
                            for j in range(k):
                                gx[b, c, y * stride + i, z * stride + j] += g
        return gx

    def avgpool2d_backward_numba(gout, x_shape, k, stride):
        return _avgpool2d_backward_numba(gout, x_shape[2], x_shape[3], k, stride)

    @njit(cache=True, parallel=True)
    def median_filter2d_numba(x, k):
        b_n, c_n, h, wd = x.shape
        p = k // 2
        out = np.empty_like(x)
        mid = (k * k) // 2
        for b in prange(b_n):
            buf = np.empty(k * k, dtype=x.dtype)
            for c in range(c_n):
                for y in range(h):
                    for z in range(wd):
                        n = 0
                        for i in range(-p, p + 1):
                            ih = y + i
                            if ih < 0:
                                ih = -ih
                            elif ih >= h:
                                ih = 2 * h - 2 - ih
                            for j in range(-p, p + 1):
                                iw = z + j
                                if iw < 0:
                                    iw = -iw
                                elif iw >= wd:
                                    iw = 2 * wd - 2 - iw
                                buf[n] = x[b, c, ih, iw]
                                n += 1
                        out[b, c, y, z] = np.sort(buf)[mid]
        return out

    _NUMBA_KERNELS = {
        "conv2d_forward": conv2d_forward_numba,
        "conv2d_backward_input": conv2d_backward_input_numba,
        "conv2d_backward_weight": conv2d_backward_weight_numba,
        "maxpool2d_forward": maxpool2d_forward_numba,
        "maxpool2d_backward": maxpool2d_backward_numba,
        "avgpool2d_forward": avgpool2d_forward_numba,
        "avgpool2d_backward": avgpool2d_backward_numba,
        "median_filter2d": median_filter2d_numba,
    }
else:  # pragma: no cover
    _NUMBA_KERNELS = {}

# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_ACTIVE = _NUMBA_KERNELS if BACKEND == "numba" else _NUMPY_KERNELS

conv2d_forward = _ACTIVE["conv2d_forward"]
conv2d_backward_input = _ACTIVE["conv2d_backward_input"]
conv2d_backward_weight = _ACTIVE["conv2d_backward_weight"]
maxpool2d_forward = _ACTIVE["maxpool2d_forward"]
maxpool2d_backward = _ACTIVE["maxpool2d_backward"]
avgpool2d_forward = _ACTIVE["avgpool2d_forward"]
avgpool2d_backward = _ACTIVE["avgpool2d_backward"]
median_filter2d = _ACTIVE["median_filter2d"]
