"""Binary tensor container (GRCT) and 8-bit PGM mask export.

GRCT layout, all little-endian:

    magic   4 bytes  "GRCT"
    version u8       1
    dtype   u8       0 = f32, 1 = f64
    rank    u8       1..4
    dims    rank x u32
    payload row-major values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .numerics import Tensor

MAGIC = b"GRCT"
VERSION = 1
_CODE_TO_DTYPE = {0: "<f4", 1: "<f8"}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """Raised for malformed GRCT files."""


def write_grct(path, tensor) -> None:
    """Serialize a rank 1..4 f32/f64 array; overwrites the target."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise FormatError(f"GRCT stores f32/f64 only, got {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise FormatError(f"GRCT stores rank 1..4, got rank {arr.ndim}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise FormatError(f"dimension too large for u32: {arr.shape}")
    code = _DTYPE_TO_CODE[arr.dtype]
    header = MAGIC + bytes([VERSION, code, arr.ndim])
    header += struct.pack("<" + "I" * arr.ndim, *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code], copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_grct(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = raw[4], raw[5], raw[6]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if not 1 <= rank <= 4:
        raise FormatError(f"{path}: rank {rank} out of range")
    dims_end = 7 + 4 * rank
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack("<" + "I" * rank, raw[7:dims_end])
    dtype = np.dtype(_CODE_TO_DTYPE[code])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = raw[dims_end:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    native = "f4" if code == 0 else "f8"
    return arr.astype(native, copy=True)


def export_pgm(path, mask) -> None:
    """Write a 2-D mask in [0, 1] as binary PGM, value = floor(255 m + 0.5)."""
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"PGM export needs a 2-D mask, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise FormatError("PGM export needs finite values in [0, 1]")
    h, w = arr.shape
    gray = np.floor(255.0 * arr.astype(np.float64) + 0.5).astype(np.uint8)
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read back a binary PGM written by export_pgm (strict, for tests)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError(f"{path}: not a PGM written by export_pgm")
    w, h = (int(v) for v in parts[1].split())
    data = parts[3]
    if len(data) != w * h:
        raise FormatError(f"{path}: payload is {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
