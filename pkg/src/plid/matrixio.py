"""Raw float32 matrix container used for embeddings and checkpoints.

Layout: 16-byte header (8-byte magic ``PLIDMAT1``, uint32 rows, uint32 cols,
little-endian), followed by ``rows * cols`` little-endian float32 values in
row-major order. The format is deliberately trivial so that non-Python
producers can emit precomputed embeddings.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import LoadError, ValidationError

MAGIC = b"PLIDMAT1"
_HEADER = struct.Struct("<8sII")


def write_matrix(path: str | Path, array: np.ndarray) -> None:
    """Write a 1-D or 2-D array as a float32 matrix (1-D becomes one row)."""
    arr = np.asarray(array)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValidationError(f"matrix container holds 2-D data, got ndim={arr.ndim}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    rows, cols = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(arr.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    """Read a matrix container, returning a (rows, cols) float32 array."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"matrix file not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise LoadError(f"truncated matrix file: {path}")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise LoadError(f"bad magic in {path}: {magic!r}")
    expected = _HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise LoadError(
            f"matrix payload size mismatch in {path}: expected {expected} bytes, got {len(data)}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(rows, cols).copy()
