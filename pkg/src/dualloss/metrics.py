"""Confusion matrices and one-vs-rest precision / recall / F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.shape != preds.shape:
        raise DimensionError("labels and predictions differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def _mean(values) -> float:
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


@dataclass
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def as_dict(self, class_names=None) -> dict:
        names = list(class_names) if class_names is not None else [str(k) for k in range(len(self.support))]
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": {
                n: {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
                for n, p, r, f, s in zip(names, self.precision, self.recall, self.f1, self.support)
            },
        }


def metrics_from_confusion(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise DimensionError(f"confusion matrix must be square and non-empty, got {cm.shape}")
    total = int(cm.sum())
    if total == 0:
        raise DimensionError("confusion matrix holds no samples")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2.0 * (precision * recall), precision + recall)
    return MetricsReport(
        accuracy=int(np.trace(cm)) / total,
        precision=precision,
        recall=recall,
        f1=f1,
        support=cm.sum(axis=1),
        macro_precision=_mean(precision),
        macro_recall=_mean(recall),
        macro_f1=_mean(f1),
    )
