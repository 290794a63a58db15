"""Binary weight checkpoints.

Layout: magic ``HTNW``, format version (u16 LE), then one record per tensor:
name length (u16 LE), UTF-8 name, rank (u8), extents (u32 LE each), values
(float32 LE, C order). Record order is preserved on load. Frozen/trainable
flags are runtime state and are not stored.
"""

from __future__ import annotations

import io
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"HTNW"
VERSION = 1


def save_weights(weights: Mapping[str, np.ndarray], path: str) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    for name, arr in weights.items():
        # asarray keeps rank-0 inputs 0-d; ascontiguousarray would promote them
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"parameter name too long to store: {name[:40]}...")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _take(raw: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(raw):
        raise FormatError(f"truncated checkpoint while reading {what}", offset=offset)
    return raw[offset:offset + count]


def load_weights(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    (version,) = struct.unpack("<H", _take(raw, 4, 2, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    weights: dict[str, np.ndarray] = {}
    pos = 6
    while pos < len(raw):
        (name_len,) = struct.unpack("<H", _take(raw, pos, 2, "name length"))
        pos += 2
        name = _take(raw, pos, name_len, "name").decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack("<B", _take(raw, pos, 1, "rank"))
        pos += 1
        shape = []
        for _ in range(rank):
            (extent,) = struct.unpack("<I", _take(raw, pos, 4, "extent"))
            shape.append(extent)
            pos += 4
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = _take(raw, pos, count * 4, f"values of {name}")
        pos += count * 4
        if name in weights:
            raise FormatError(f"duplicate parameter record {name!r}", offset=pos)
        weights[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return weights
