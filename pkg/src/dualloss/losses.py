"""Cross-entropy, ArcFace, Center Loss and their weighted combination.

Every loss returns a :class:`LossOutput` carrying analytic gradients with
respect to its differentiable inputs. Class centers are running state,
never differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, LabelError, ParameterError
from .tensor import as_tensor, check_finite, l2_normalize, log_softmax

COS_CLAMP = 1e-7


@dataclass(frozen=True)
class ArcFaceParams:
    scale: float = 30.0
    margin: float = 0.5

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError(f"ArcFace scale must be positive, got {self.scale}")
        if not 0 <= self.margin < math.pi:
            raise ParameterError(f"ArcFace margin must lie in [0, pi), got {self.margin}")

    @property
    def threshold(self) -> float:
        """cos(pi - m): target cosines at or below this take the fallback branch."""
        return math.cos(math.pi - self.margin)


@dataclass(frozen=True)
class DualLossConfig:
    alpha: float = 0.5

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ParameterError(f"alpha must be non-negative, got {self.alpha}")


@dataclass
class ClassCenters:
    centers: np.ndarray
    rate: float = 0.5

    def __post_init__(self):
        self.centers = as_tensor(self.centers, 2, "centers")
        if not 0 < self.rate <= 1:
            raise ParameterError(f"center update rate must lie in (0, 1], got {self.rate}")
        check_finite(self.centers, "centers")

    @classmethod
    def zeros(cls, num_classes: int, dim: int, rate: float = 0.5) -> "ClassCenters":
        return cls(np.zeros((num_classes, dim)), rate)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass
class LossOutput:
    loss: float
    grad_embeddings: np.ndarray | None = None
    grad_weights: np.ndarray | None = None
    grad_logits: np.ndarray | None = None
    components: dict[str, float] = field(default_factory=dict)
    margin_branch: np.ndarray | None = None  # ArcFace: True where cos(theta + m) was used


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise LabelError("labels must be integers")
        labels = labels.astype(np.int64)
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels) -> LossOutput:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits, 2, "logits")
    n, c = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy on an empty batch")
    labels = _check_labels(labels, n, c)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -float(np.sum(logp[rows, labels])) / n
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return LossOutput(loss=loss, grad_logits=grad, components={"ce": loss})


def cosine_logits(embeddings: np.ndarray, weights: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Margin-free cosine logits ``scale * n(e) . n(w)^T``; used at evaluation time."""
    e = l2_normalize(as_tensor(embeddings, 2, "embeddings"))
    w = l2_normalize(as_tensor(weights, 2, "weights"))
    if e.shape[1] != w.shape[1]:
        raise DimensionError(f"embedding dim {e.shape[1]} != weight dim {w.shape[1]}")
    return scale * (e @ w.T)


def _arcface_forward(embeddings, weights, labels, params: ArcFaceParams):
    embeddings = as_tensor(embeddings, 2, "embeddings")
    weights = as_tensor(weights, 2, "weights")
    if embeddings.shape[1] != weights.shape[1]:
        raise DimensionError(f"embedding dim {embeddings.shape[1]} != weight dim {weights.shape[1]}")
    n = embeddings.shape[0]
    labels = _check_labels(labels, n, weights.shape[0])
    e_norm = np.linalg.norm(embeddings, axis=1, keepdims=True)
    w_norm = np.linalg.norm(weights, axis=1, keepdims=True)
    e_hat = l2_normalize(embeddings)
    w_hat = l2_normalize(weights)
    raw = e_hat @ w_hat.T
    cos = np.clip(raw, -1 + COS_CLAMP, 1 - COS_CLAMP)
    rows = np.arange(n)
    cos_t = cos[rows, labels]
    sin_t = np.sqrt(1.0 - cos_t * cos_t)
    cm, sm = math.cos(params.margin), math.sin(params.margin)
    on_margin = cos_t > params.threshold
    target = np.where(on_margin, cos_t * cm - sin_t * sm, cos_t - params.margin * sm)
    # d target / d cos: margin branch differentiates cos(acos(c) + m)
    dtarget = np.where(on_margin, cm + sm * cos_t / sin_t, 1.0)
    z = cos.copy()
    z[rows, labels] = target
    cache = dict(e_hat=e_hat, w_hat=w_hat, e_norm=e_norm, w_norm=w_norm, raw=raw,
                 labels=labels, dtarget=dtarget, on_margin=on_margin)
    return params.scale * z, cache


def arcface_logits(embeddings, weights, labels, params: ArcFaceParams) -> np.ndarray:
    """Scaled cosine logits with an additive angular margin on the target class."""
    logits, _ = _arcface_forward(embeddings, weights, labels, params)
    return check_finite(logits, "arcface logits")


def margin_branch_mask(embeddings, weights, labels, params: ArcFaceParams) -> np.ndarray:
    """Per-sample flag: True where the target uses cos(theta + m) rather than the fallback."""
    _, cache = _arcface_forward(embeddings, weights, labels, params)
    return cache["on_margin"]


def _normalize_backward(g_hat, x_hat, norm):
    # d(x/|x|) applied to upstream g: (g - x_hat (x_hat . g)) / |x|
    return (g_hat - x_hat * np.sum(x_hat * g_hat, axis=1, keepdims=True)) / norm


def arcface_loss(embeddings, weights, labels, params: ArcFaceParams) -> LossOutput:
    logits, cache = _arcface_forward(embeddings, weights, labels, params)
    ce = cross_entropy(logits, cache["labels"])
    n = logits.shape[0]
    rows = np.arange(n)
    g_cos = params.scale * ce.grad_logits
    g_cos[rows, cache["labels"]] *= cache["dtarget"]
    # clamped entries have zero derivative w.r.t. the raw cosine
    g_cos[np.abs(cache["raw"]) > 1 - COS_CLAMP] = 0.0
    g_e_hat = g_cos @ cache["w_hat"]
    g_w_hat = g_cos.T @ cache["e_hat"]
    grad_e = _normalize_backward(g_e_hat, cache["e_hat"], cache["e_norm"])
    grad_w = _normalize_backward(g_w_hat, cache["w_hat"], cache["w_norm"])
    return LossOutput(
        loss=ce.loss,
        grad_embeddings=check_finite(grad_e, "arcface grad_embeddings"),
        grad_weights=check_finite(grad_w, "arcface grad_weights"),
        grad_logits=ce.grad_logits,
        components={"arc": ce.loss},
        margin_branch=cache["on_margin"],
    )


def center_loss(embeddings, centers: ClassCenters, labels) -> LossOutput:
    """Mean squared distance from each embedding to its class center."""
    embeddings = as_tensor(embeddings, 2, "embeddings")
    n, d = embeddings.shape
    if n == 0:
        raise DimensionError("center_loss on an empty batch")
    if d != centers.dim:
        raise DimensionError(f"embedding dim {d} != center dim {centers.dim}")
    labels = _check_labels(labels, n, centers.num_classes)
    diff = embeddings - centers.centers[labels]
    loss = float(np.sum(diff * diff)) / n
    return LossOutput(loss=loss, grad_embeddings=(2.0 / n) * diff, components={"center": loss})


def update_centers(centers: ClassCenters, embeddings, labels) -> ClassCenters:
    """Move each present class center toward its batch members.

    delta_k = sum_{i: y_i = k} (c_k - e_i) / (1 + n_k);  c_k <- c_k - rate * delta_k.
    Classes absent from the batch keep their center. Returns a new object.
    """
    embeddings = as_tensor(embeddings, 2, "embeddings")
    labels = _check_labels(labels, embeddings.shape[0], centers.num_classes)
    new = centers.centers.copy()
    for k in np.unique(labels):
        members = embeddings[labels == k]
        delta = np.sum(new[k] - members, axis=0) / (1 + members.shape[0])
        new[k] = new[k] - centers.rate * delta
    return ClassCenters(check_finite(new, "updated centers"), centers.rate)


def dual_loss(embeddings, weights, labels, params: ArcFaceParams, centers: ClassCenters,
              cfg: DualLossConfig) -> LossOutput:
    """ArcFace loss plus ``alpha`` times Center Loss."""
    arc = arcface_loss(embeddings, weights, labels, params)
    cen = center_loss(embeddings, centers, labels)
    return LossOutput(
        loss=arc.loss + cfg.alpha * cen.loss,
        grad_embeddings=arc.grad_embeddings + cfg.alpha * cen.grad_embeddings,
        grad_weights=arc.grad_weights,
        grad_logits=arc.grad_logits,
        components={"arc": arc.loss, "center": cen.loss},
        margin_branch=arc.margin_branch,
    )
