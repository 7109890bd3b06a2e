from __future__ import annotations

import logging
import os
import re

import numpy as np

from ..errors import DatasetError, FormatError
from .dataset import SPLITS, DatasetSplit, Sample

log = logging.getLogger(__name__)

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode a binary P6 image (maxval 255) into a (3, H, W) float array in [0, 1]."""
    if data[:2] != b"P6":
        raise FormatError(f"not a binary PPM: magic {data[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated PPM header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"bad PPM header token {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval} (only 255)")
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid PPM size {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace before PPM raster")
    pos += 1
    need = width * height * 3
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise FormatError(f"truncated PPM raster: {len(raster)} of {need} bytes")
    px = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode a (3, H, W) image in [0, 1] as binary P6, rounding to 8 bits."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return b"P6\n%d %d\n255\n" % (w, h) + px.tobytes()


def load_image_folder(root, split: str, *, skip_bad: bool = False,
                      class_names: tuple[str, ...] | None = None) -> DatasetSplit:
    """Load ``root/<split>/<class>/*.ppm``. Classes sort lexicographically, files by name."""
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    base = os.path.join(root, split)
    if not os.path.isdir(base):
        raise DatasetError(f"missing split directory: {base}")
    found = sorted(d for d in os.listdir(base) if os.path.isdir(os.path.join(base, d)))
    names = tuple(class_names) if class_names is not None else tuple(found)
    unknown = set(found) - set(names)
    if unknown:
        raise DatasetError(f"{base}: class directories {sorted(unknown)} not in class list")
    samples = []
    for label, name in enumerate(names):
        cdir = os.path.join(base, name)
        files = sorted(f for f in os.listdir(cdir)) if os.path.isdir(cdir) else []
        files = [f for f in files if f.lower().endswith(".ppm")]
        n_ok = 0
        for fname in files:
            path = os.path.join(cdir, fname)
            with open(path, "rb") as fh:
                data = fh.read()
            try:
                img = decode_ppm(data)
            except FormatError as exc:
                if not skip_bad:
                    raise FormatError(f"{path}: {exc}") from None
                log.warning("skipping undecodable %s: %s", path, exc)
                continue
            samples.append(Sample(img, label, f"{split}/{name}/{fname}"))
            n_ok += 1
        if n_ok == 0:
            raise DatasetError(f"class {name!r} has no readable images under {cdir}")
    return DatasetSplit(tuple(samples), names, split)
