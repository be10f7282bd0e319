"""Tensor container codec for interchange with the evaluation engine.

The adapter deliberately carries its own encoder/decoder instead of importing
the engine: the two packages talk only through files.  The container layout is

    bytes 0..3    magic ``QPT1``
    bytes 4..7    rank as little-endian uint32 (1 through 4)
    next 4*rank   one little-endian uint32 extent per axis (each >= 1)
    remainder     float32 little-endian payload in row-major order

and the file length must be exactly ``8 + 4*rank + 4*prod(extents)``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"QPT1"
MAX_RANK = 4


class AdapterError(Exception):
    """Raised when the adapter cannot produce or consume an artifact."""


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize ``array`` as a container blob, refusing non-finite payloads."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise AdapterError(f"tensor rank {arr.ndim} outside supported range 1..{MAX_RANK}")
    if any(extent < 1 for extent in arr.shape):
        raise AdapterError(f"tensor has an empty axis: shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise AdapterError("refusing to export a tensor with NaN or infinite entries")
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def write_tensor(array: np.ndarray, path: Path | str) -> None:
    """Encode ``array`` and write it to ``path`` atomically."""
    path = Path(path)
    blob = encode_tensor(array)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def decode_tensor(blob: bytes, name: str = "<tensor>") -> np.ndarray:
    """Parse a container blob back into a float32 array."""
    if len(blob) < 8:
        raise AdapterError(f"{name}: truncated container ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise AdapterError(f"{name}: bad magic {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank < 1 or rank > MAX_RANK:
        raise AdapterError(f"{name}: rank {rank} outside supported range 1..{MAX_RANK}")
    if len(blob) < 8 + 4 * rank:
        raise AdapterError(f"{name}: header truncated")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    if any(extent < 1 for extent in shape):
        raise AdapterError(f"{name}: empty axis in shape {shape}")
    count = 1
    for extent in shape:
        count *= extent
    expected = 8 + 4 * rank + 4 * count
    if len(blob) != expected:
        raise AdapterError(f"{name}: expected {expected} bytes, found {len(blob)}")
    payload = np.frombuffer(blob, dtype="<f4", offset=8 + 4 * rank)
    return payload.reshape(shape).astype(np.float32)


def read_tensor(path: Path | str) -> np.ndarray:
    """Read and decode the container file at ``path``."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise AdapterError(f"cannot read tensor file {path}: {exc}") from exc
    return decode_tensor(blob, name=str(path))
