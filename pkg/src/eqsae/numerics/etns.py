"""ETNS tensor files.

Layout: b"ETNS", u8 version (1), u8 dtype (0=f32, 1=f64), u8 ndim,
ndim little-endian u64 extents, then little-endian row-major scalars.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ETNS"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class EtnsFormatError(ValueError):
    pass


def to_bytes(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in _CODES:
        raise EtnsFormatError(f"ETNS stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise EtnsFormatError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, _CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise EtnsFormatError("bad magic")
    version, code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise EtnsFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise EtnsFormatError(f"unknown dtype code {code}")
    off = 7 + 8 * ndim
    if len(blob) < off:
        raise EtnsFormatError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 7)
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - off != count * dtype.itemsize:
        raise EtnsFormatError(f"payload has {len(blob) - off} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(blob, dtype=dtype, offset=off, count=count).reshape(shape).astype(dtype.newbyteorder("="))


def save(path: str | Path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(array))
    tmp.replace(path)


def load(path: str | Path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
