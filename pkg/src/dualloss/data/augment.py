"""Training augmentation and evaluation preprocessing for (3, H, W) images in [0, 1].

Training order: resize -> horizontal flip -> rotation -> brightness ->
contrast -> saturation -> translation -> per-channel normalization.
Geometric steps sample bilinearly and fill uncovered pixels with 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, ParameterError
from ..tensor import RngStream

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_degrees: float = 15.0
    jitter: float = 0.1
    translate: float = 0.1
    target_size: int = 299
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        for name in ("flip_prob", "jitter", "translate"):
            if not 0 <= getattr(self, name) < 1:
                raise ParameterError(f"augment.{name} must lie in [0, 1)")
        if self.rotation_degrees < 0:
            raise ParameterError("augment.rotation_degrees must be non-negative")
        if self.target_size < 1:
            raise ParameterError("augment.target_size must be positive")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ParameterError("augment.mean/std need three entries with positive std")


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] < 1 or img.shape[2] < 1:
        raise DimensionError(f"expected a (3, H, W) image, got {img.shape}")
    return img


def _lerp(a, b, w):
    return a + w * (b - a)


def resize_bilinear(img: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    img = _check_image(img)
    oh, ow = (size, size) if isinstance(size, int) else size
    _, h, w = img.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = axis(h, oh)
    x0, x1, wx = axis(w, ow)
    top = _lerp(img[:, y0][:, :, x0], img[:, y0][:, :, x1], wx[None, None, :])
    bot = _lerp(img[:, y1][:, :, x0], img[:, y1][:, :, x1], wx[None, None, :])
    out = _lerp(top, bot, wy[None, :, None])
    return np.clip(out, img.min(), img.max())


def _sample_zero_fill(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Bilinear lookup at (sy, sx); neighbours outside the image read as 0."""
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)))
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    wy, wx = sy - y0, sx - x0
    # indices into the padded image, clamped so far-away points hit the zero border
    iy0 = np.clip(y0.astype(np.int64) + 1, 0, h + 1)
    iy1 = np.clip(y0.astype(np.int64) + 2, 0, h + 1)
    ix0 = np.clip(x0.astype(np.int64) + 1, 0, w + 1)
    ix1 = np.clip(x0.astype(np.int64) + 2, 0, w + 1)
    top = _lerp(padded[:, iy0, ix0], padded[:, iy0, ix1], wx)
    bot = _lerp(padded[:, iy1, ix0], padded[:, iy1, ix1], wx)
    return _lerp(top, bot, wy)


def hflip(img: np.ndarray) -> np.ndarray:
    return _check_image(img)[:, :, ::-1].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre."""
    img = _check_image(img)
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: rotate output coordinates clockwise to find the source
    sx = c * dx - s * dy + cx
    sy = s * dx + c * dy + cy
    return _sample_zero_fill(img, sy, sx)


def translate(img: np.ndarray, tx: int, ty: int) -> np.ndarray:
    """Shift by whole pixels (right/down positive), filling with 0."""
    img = _check_image(img)
    _, h, w = img.shape
    out = np.zeros_like(img)
    if abs(tx) >= w or abs(ty) >= h:
        return out
    src = img[:, max(0, -ty):h - max(0, ty), max(0, -tx):w - max(0, tx)]
    out[:, max(0, ty):max(0, ty) + src.shape[1], max(0, tx):max(0, tx) + src.shape[2]] = src
    return out


def _blend(img, other, factor):
    return np.clip(factor * img + (1.0 - factor) * other, 0.0, 1.0)


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(_check_image(img) * factor, 0.0, 1.0)


def _luma(img):
    return np.tensordot(LUMA, img, axes=(0, 0))


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    img = _check_image(img)
    return _blend(img, float(_luma(img).mean()), factor)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    img = _check_image(img)
    return _blend(img, _luma(img)[None], factor)


def normalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return (img - m) / s


def denormalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return img * s + m


def _check_range(img):
    img = _check_image(img)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ParameterError("augmentation input must lie in [0, 1]")
    return img


def eval_transform(img: np.ndarray, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Deterministic resize + normalize."""
    img = _check_range(img)
    return normalize(resize_bilinear(img, cfg.target_size), cfg.mean, cfg.std)


def augment(img: np.ndarray, cfg: AugmentConfig, stream: RngStream) -> np.ndarray:
    """Stochastic training pipeline. Draws exactly seven uniforms from ``stream``."""
    img = _check_range(img)
    u = stream.uniform(0.0, 1.0, 7)
    x = resize_bilinear(img, cfg.target_size)
    if u[0] < cfg.flip_prob:
        x = hflip(x)
    x = rotate(x, (2.0 * u[1] - 1.0) * cfg.rotation_degrees)
    lo, hi = 1.0 - cfg.jitter, 1.0 + cfg.jitter
    x = adjust_brightness(x, lo + (hi - lo) * u[2])
    x = adjust_contrast(x, lo + (hi - lo) * u[3])
    x = adjust_saturation(x, lo + (hi - lo) * u[4])
    size = cfg.target_size
    tx = int(round((2.0 * u[5] - 1.0) * cfg.translate * size))
    ty = int(round((2.0 * u[6] - 1.0) * cfg.translate * size))
    x = translate(x, tx, ty)
    return normalize(x, cfg.mean, cfg.std)
