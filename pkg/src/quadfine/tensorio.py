"""Tensor and checkpoint file formats.

FTNS files hold one C*H*W float32 block: the magic bytes ``FTNS``, three
little-endian uint32 (C, H, W), then C*H*W little-endian IEEE-754 float32
values in channel-major row-major order. Parameter checkpoints are one FTNS
file per parameter plus a UTF-8 index mapping names to files (with the
logical shape, since FTNS itself is always 3D). Writes are atomic
(temp file + rename) and round-trip bit-exactly.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FTNS"


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_tensor(path, a: np.ndarray) -> None:
    """Write a 3D float array to an FTNS file (cast to float32)."""
    a = np.asarray(a)
    if a.ndim != 3:
        raise ValueError(f"FTNS stores 3D tensors, got shape {a.shape}")
    c, h, w = a.shape
    header = MAGIC + struct.pack("<III", c, h, w)
    body = np.ascontiguousarray(a, dtype="<f4").tobytes()
    _atomic_write(path, header + body)


def load_tensor(path) -> np.ndarray:
    """Read an FTNS file into a float32 array of shape (C, H, W)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: missing FTNS magic")
    c, h, w = struct.unpack("<III", raw[4:16])
    n = c * h * w
    if len(raw) - 16 < 4 * n:
        raise ValueError(
            f"{path}: truncated payload ({(len(raw) - 16) // 4} of {n} values)"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=16)
    return data.reshape(c, h, w).copy()


def _as_3d(a: np.ndarray) -> np.ndarray:
    """View an arbitrary-rank array as 3D for FTNS storage."""
    if a.ndim == 0:
        return a.reshape(1, 1, 1)
    if a.ndim == 1:
        return a.reshape(1, 1, -1)
    if a.ndim == 2:
        return a.reshape(1, *a.shape)
    if a.ndim == 3:
        return a
    return a.reshape(a.shape[0], a.shape[1], -1)


def save_checkpoint(directory, arrays: dict[str, np.ndarray]) -> Path:
    """Write named arrays as FTNS files plus an index; returns the index path.

    Index lines: ``name<TAB>relative_file<TAB>comma-separated-shape``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, a) in enumerate(arrays.items()):
        a = np.asarray(a, dtype=np.float32)
        fname = f"param_{i:04d}.ftns"
        save_tensor(directory / fname, _as_3d(a))
        shape = ",".join(str(s) for s in a.shape) if a.ndim else ""
        lines.append(f"{name}\t{fname}\t{shape}\n")
    index = directory / "index.tsv"
    _atomic_write(index, "".join(lines).encode("utf-8"))
    return index


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    directory = Path(directory)
    index = directory / "index.tsv"
    out: dict[str, np.ndarray] = {}
    for line in index.read_text("utf-8").splitlines():
        if not line:
            continue
        name, fname, shape = line.split("\t")
        a = load_tensor(directory / fname)
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        out[name] = a.reshape(dims)
    return out
