"""Synthetic fine-grained feature datasets.

Each class is a unit direction on the sphere; samples scatter around it by
a tangent-space Gaussian whose expected angular deviation is about
``sigma_intra`` radians, then get a random radial scale so the raw features
are not already normalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DatasetError, ParameterError
from ..tensor import RngStream
from .dataset import DatasetSplit, Sample

_DIRECTIONS, _SAMPLES, _SPLIT = 1, 2, 3
MAX_RETRIES = 1000


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 6
    per_class: int = 300
    dim: int = 32
    sigma_intra: float = 0.25
    delta_inter: float = 0.35
    seed: int = 42

    def __post_init__(self):
        if self.classes < 2:
            raise ParameterError("synthetic data needs at least 2 classes")
        if self.per_class < 1 or self.dim < 2:
            raise ParameterError("per_class must be >= 1 and dim >= 2")
        if self.sigma_intra < 0:
            raise ParameterError("sigma_intra must be non-negative")
        if not self.delta_inter > 0:
            raise ParameterError("delta_inter must be positive")


def pairwise_angles(directions: np.ndarray) -> np.ndarray:
    cos = np.clip(directions @ directions.T, -1.0, 1.0)
    return np.arccos(cos)


def class_directions(cfg: SynthConfig) -> np.ndarray:
    """Sequentially draw unit directions, rejecting any closer than ``delta_inter`` to an earlier one."""
    rng = RngStream(cfg.seed, _DIRECTIONS)
    dirs: list[np.ndarray] = []
    retries = 0
    while len(dirs) < cfg.classes:
        v = rng.normal(0.0, 1.0, cfg.dim)
        v /= np.linalg.norm(v)
        if all(math.acos(min(1.0, max(-1.0, float(v @ d)))) >= cfg.delta_inter for d in dirs):
            dirs.append(v)
            continue
        retries += 1
        if retries > MAX_RETRIES:
            raise DatasetError(
                f"could not place {cfg.classes} directions {cfg.delta_inter} rad apart in {cfg.dim} dims "
                f"after {MAX_RETRIES} retries")
    return np.stack(dirs)


def synth_dataset(cfg: SynthConfig) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Return stratified 70/15/15 train/validation/test splits of feature samples.

    Features are rounded to float32 values so a feature-file roundtrip is lossless.
    """
    dirs = class_directions(cfg)
    names = tuple(f"class_{k}" for k in range(cfg.classes))
    n_train = int(round(0.70 * cfg.per_class))
    n_val = int(round(0.15 * cfg.per_class))
    parts: dict[str, list[Sample]] = {"train": [], "validation": [], "test": []}
    tangent_std = cfg.sigma_intra / math.sqrt(cfg.dim - 1)
    for k, d in enumerate(dirs):
        rng = RngStream(cfg.seed, _SAMPLES, k)
        noise = rng.normal(0.0, tangent_std, (cfg.per_class, cfg.dim)) if cfg.sigma_intra > 0 \
            else np.zeros((cfg.per_class, cfg.dim))
        noise -= np.outer(noise @ d, d)
        pts = d + noise
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        pts *= rng.uniform(0.5, 2.0, (cfg.per_class, 1))
        pts = pts.astype(np.float32).astype(np.float64)
        order = RngStream(cfg.seed, _SPLIT, k).permutation(cfg.per_class)
        for rank, i in enumerate(order):
            tag = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
            parts[tag].append(Sample(pts[i], k, f"synth/{names[k]}/{i}"))
    return tuple(DatasetSplit(tuple(parts[t]), names, t) for t in ("train", "validation", "test"))
