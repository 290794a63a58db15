"""Raster containers and their binary formats.

Two on-disk formats:

* ``TSRC``: a multitemporal image cube, float32 LE, stored timestep-major
  with header magic ``TSRC``, version (u16 LE), T, C, H, W (u32 LE each) and
  a dtype code (u8; 1 = float32).
* ``TSLB``: a label raster, uint16 LE, header magic ``TSLB``, version
  (u16 LE), H, W (u32 LE each). The value 65535 marks nodata.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import FormatError, InputError, ShapeError

NODATA = 65535

_CUBE_MAGIC = b"TSRC"
_LABEL_MAGIC = b"TSLB"
_VERSION = 1
_DTYPE_F32 = 1


def check_cube(arr, name: str = "cube") -> np.ndarray:
    """Validate a (T,C,H,W) image cube and return it as contiguous float32."""
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4D (T,C,H,W), got shape {arr.shape}")
    if any(s < 1 for s in arr.shape):
        raise ShapeError(f"{name} has an empty extent: {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr, dtype=np.float32)


def check_labels(arr, name: str = "labels", n_classes: int | None = None) -> np.ndarray:
    """Validate an (H,W) label raster and return it as uint16 with NODATA=65535."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2D (H,W), got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if np.issubdtype(arr.dtype, np.floating) and np.all(np.mod(arr[np.isfinite(arr)], 1) == 0):
            arr = arr.astype(np.int64)
        else:
            raise InputError(f"{name} must contain integer class ids")
    if arr.min() < 0 or arr.max() > NODATA:
        raise InputError(f"{name} ids must lie in [0, {NODATA}]")
    out = arr.astype(np.uint16)
    if n_classes is not None:
        valid = out[out != NODATA]
        if valid.size and int(valid.max()) >= n_classes:
            raise InputError(f"{name} contains class id {int(valid.max())}, "
                             f"but only {n_classes} classes are defined")
    return out


def write_cube(cube: np.ndarray, path: str) -> None:
    cube = check_cube(cube)
    t, c, h, w = cube.shape
    buf = io.BytesIO()
    buf.write(_CUBE_MAGIC)
    buf.write(struct.pack("<H", _VERSION))
    buf.write(struct.pack("<IIII", t, c, h, w))
    buf.write(struct.pack("<B", _DTYPE_F32))
    buf.write(np.ascontiguousarray(cube, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _take(raw: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(raw):
        raise FormatError(f"truncated raster while reading {what}", offset=offset)
    return raw[offset:offset + count]


def read_cube(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CUBE_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {_CUBE_MAGIC!r}", offset=0)
    (version,) = struct.unpack("<H", _take(raw, 4, 2, "version"))
    if version != _VERSION:
        raise FormatError(f"unsupported cube version {version}", offset=4)
    t, c, h, w = struct.unpack("<IIII", _take(raw, 6, 16, "extents"))
    (dtype_code,) = struct.unpack("<B", _take(raw, 22, 1, "dtype code"))
    if dtype_code != _DTYPE_F32:
        raise FormatError(f"unknown dtype code {dtype_code}", offset=22)
    count = t * c * h * w
    payload = _take(raw, 23, count * 4, "pixel values")
    if len(raw) != 23 + count * 4:
        raise FormatError("trailing bytes after pixel values", offset=23 + count * 4)
    return np.frombuffer(payload, dtype="<f4").reshape(t, c, h, w).copy()


def write_labels(labels: np.ndarray, path: str) -> None:
    labels = check_labels(labels)
    h, w = labels.shape
    buf = io.BytesIO()
    buf.write(_LABEL_MAGIC)
    buf.write(struct.pack("<H", _VERSION))
    buf.write(struct.pack("<II", h, w))
    buf.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_labels(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _LABEL_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {_LABEL_MAGIC!r}", offset=0)
    (version,) = struct.unpack("<H", _take(raw, 4, 2, "version"))
    if version != _VERSION:
        raise FormatError(f"unsupported label version {version}", offset=4)
    h, w = struct.unpack("<II", _take(raw, 6, 8, "extents"))
    payload = _take(raw, 14, h * w * 2, "label values")
    if len(raw) != 14 + h * w * 2:
        raise FormatError("trailing bytes after label values", offset=14 + h * w * 2)
    return np.frombuffer(payload, dtype="<u2").reshape(h, w).copy()
