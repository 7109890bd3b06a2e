from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DatasetError, LabelError

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class Sample:
    input: np.ndarray  # image (3, H, W) in [0, 1], or feature vector (F,)
    label: int
    source_id: str


@dataclass(frozen=True)
class DatasetSplit:
    samples: tuple[Sample, ...]
    class_names: tuple[str, ...]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split tag {self.split!r}; expected one of {SPLITS}")
        c = len(self.class_names)
        for s in self.samples:
            if not 0 <= s.label < c:
                raise LabelError(f"{s.source_id}: label {s.label} outside [0, {c})")

    def __len__(self):
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def is_image(self) -> bool:
        return bool(self.samples) and self.samples[0].input.ndim == 3

    def feature_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 0))
        return np.stack([s.input for s in self.samples]).astype(np.float64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)
