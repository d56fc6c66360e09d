"""Flat binary parameter checkpoints.

Layout (all integers little-endian)::

    b"CFCKPT" | u16 version | u32 n_records
    per record: u16 name_len | name (utf-8) | u8 ndim | u64 * ndim shape | f64 data (C order, LE)
"""
from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import DataError

MAGIC = b"CFCKPT"
VERSION = 1


def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise DataError(f"{path} is not a checkpoint")
    try:
        return _parse(buf, path)
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"truncated or corrupt checkpoint {path}: {exc}") from None


def _parse(buf: bytes, path) -> dict[str, np.ndarray]:
    pos = len(MAGIC)
    version, n = struct.unpack_from("<HI", buf, pos)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos += 6
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        if pos + 8 * count > len(buf):
            raise DataError(f"truncated checkpoint {path}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(buf):
        raise DataError(f"trailing bytes in checkpoint {path}")
    return out
