"""MFV1 feature files.

Little-endian layout: ``b"MFV1"`` | u32 N | u32 F | u32 C | N*F float32
(row-major) | N u32 labels.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FormatError
from .dataset import DatasetSplit, Sample

MAGIC = b"MFV1"
_HEADER = struct.Struct("<4sIII")


def write_features(path, split: DatasetSplit, num_features: int | None = None) -> None:
    feats = split.feature_matrix()
    n = len(split)
    f = feats.shape[1] if n else int(num_features or 0)
    if n and feats.ndim != 2:
        raise FormatError("feature files hold flat feature vectors, not images")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, f, split.num_classes))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(split.labels, dtype="<u4").tobytes())


def read_header(path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    return _parse_header(head, path)


def _parse_header(head: bytes, path) -> tuple[int, int, int]:
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(head)} of {_HEADER.size} bytes)")
    magic, n, f, c = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    return n, f, c


def read_features(path, split: str = "train", class_names=None) -> DatasetSplit:
    with open(path, "rb") as fh:
        blob = fh.read()
    n, f, c = _parse_header(blob[: _HEADER.size], path)
    expected = _HEADER.size + 4 * n * f + 4 * n
    if len(blob) != expected:
        raise FormatError(f"{path}: size {len(blob)} bytes does not match header (N={n}, F={f}) -> {expected}")
    off = _HEADER.size
    feats = np.frombuffer(blob, dtype="<f4", count=n * f, offset=off).reshape(n, f).astype(np.float64)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off + 4 * n * f)
    if n and labels.max() >= c:
        raise FormatError(f"{path}: label {int(labels.max())} >= class count {c}")
    names = tuple(class_names) if class_names is not None else tuple(f"class_{k}" for k in range(c))
    if len(names) != c:
        raise FormatError(f"{path}: {len(names)} class names supplied for C={c}")
    base = os.path.basename(str(path))
    samples = tuple(Sample(feats[i], int(labels[i]), f"{base}#{i}") for i in range(n))
    return DatasetSplit(samples, names, split)
