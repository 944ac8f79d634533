"""Image and sinogram files.

CSV: a header line ``image,<n_side>`` or ``sinogram,<m>`` followed by one
value per line (``repr`` precision, so values round-trip exactly).

Binary: 16-byte header (8-byte magic, little-endian uint64 dimension)
followed by float64 little-endian values.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"STIMAGE\x00"
SINOGRAM_MAGIC = b"STSINO\x00\x00"
_KINDS = {"image": IMAGE_MAGIC, "sinogram": SINOGRAM_MAGIC}


def _check(kind, values):
    if kind not in _KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    values = np.asarray(values, dtype=float)
    if kind == "image":
        n_side = int(round(np.sqrt(values.size)))
        if n_side * n_side != values.size:
            raise ValueError("image values must form a square grid")
        return values.ravel(), n_side
    return values.ravel(), values.size


def write_csv(path, values, kind: str = "image") -> None:
    flat, dim = _check(kind, values)
    lines = [f"{kind},{dim}"]
    lines.extend(repr(float(v)) for v in flat)
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> tuple[str, np.ndarray]:
    """Return ``(kind, values)``; images come back as 2-D arrays."""
    lines = Path(path).read_text().split()
    kind, dim = lines[0].split(",")
    dim = int(dim)
    values = np.array([float(v) for v in lines[1:]])
    if kind == "image":
        if values.size != dim * dim:
            raise ValueError(f"{path}: expected {dim * dim} values, found {values.size}")
        return kind, values.reshape(dim, dim)
    if kind != "sinogram" or values.size != dim:
        raise ValueError(f"{path}: malformed {kind} file")
    return kind, values


def write_binary(path, values, kind: str = "image") -> None:
    flat, dim = _check(kind, values)
    with open(path, "wb") as fh:
        fh.write(_KINDS[kind])
        fh.write(struct.pack("<Q", dim))
        fh.write(flat.astype("<f8").tobytes())


def read_binary(path) -> tuple[str, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, (dim,) = raw[:8], struct.unpack("<Q", raw[8:16])
    values = np.frombuffer(raw[16:], dtype="<f8").astype(float)
    if magic == IMAGE_MAGIC:
        if values.size != dim * dim:
            raise ValueError(f"{path}: truncated image")
        return "image", values.reshape(dim, dim)
    if magic == SINOGRAM_MAGIC:
        if values.size != dim:
            raise ValueError(f"{path}: truncated sinogram")
        return "sinogram", values
    raise ValueError(f"{path}: bad magic {magic!r}")
