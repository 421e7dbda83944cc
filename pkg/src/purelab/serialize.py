"""Binary tensor-table file format ("ZPWT").

Layout, all little-endian:

    magic   4 bytes  b"ZPWT"
    version u32      1
    count   u32      number of tensors (must be > 0)
    per tensor:
        name_len u16, name utf-8 bytes
        rank     u8,  dims u32[rank]
        payload  f32[prod(dims)] in C order

Used for classifier weights and for dumping image batches for replay.
"""
from __future__ import annotations

import struct
from typing import Dict

import numpy as np

MAGIC = b"ZPWT"
VERSION = 1


class TensorFileError(ValueError):
    """Raised for malformed tensor files."""


def write_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    if not tensors:
        raise TensorFileError("no tensors to write")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFileError("unexpected EOF")
    return buf


def read_tensors(path) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise TensorFileError("bad magic: not a ZPWT file")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise TensorFileError(f"unsupported version {version}")
        if count == 0:
            raise TensorFileError("no tensors")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, 4 * n)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
