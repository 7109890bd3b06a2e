"""Mini-batch training with dual-loss supervision, evaluation, ablation and embedding statistics."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, no_decay_set
from .config import LOSS_MODES, TrainConfig
from .data.augment import AugmentConfig, augment, eval_transform, resize_bilinear
from .data.dataset import DatasetSplit
from .errors import DatasetError, DimensionError, NumericError, ParameterError
from .losses import (ArcFaceParams, ClassCenters, DualLossConfig, LossOutput, arcface_loss, center_loss,
                     cosine_logits, cross_entropy, dual_loss, update_centers)
from .metrics import MetricsReport, confusion_matrix, metrics_from_confusion
from .model import CNN_CHANNELS, CNN_INPUT, EmbeddingModel, ModelDims, classify, init_params
from .optim import AdamWState, adamw_step
from .tensor import RngStream, l2_normalize

log = logging.getLogger(__name__)

# stream tags under the run seed
_SHUFFLE, _DROPOUT, _AUGMENT, _MODEL = 11, 12, 13, 14
EVAL_CHUNK = 256


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    components: dict[str, float]
    val_accuracy: float | None
    wall_time: float
    batches: list[dict[str, float]] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        """Deterministic record; wall time is kept out so logs of identical runs are byte-equal."""
        rec = {"epoch": self.epoch, "loss": self.loss, "val_accuracy": self.val_accuracy}
        rec.update({f"loss_{k}": v for k, v in self.components.items()})
        return json.dumps(rec, sort_keys=True)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def timing_jsonl(self) -> str:
        return "".join(json.dumps({"epoch": r.epoch, "wall_time": r.wall_time}) + "\n" for r in self.records)


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best validation epoch
    last: Checkpoint
    log: TrainLog


def model_dims(cfg: TrainConfig, train_split: DatasetSplit) -> ModelDims:
    if cfg.extractor == "small-cnn":
        in_features = CNN_CHANNELS[-1]
        if not train_split.is_image:
            raise DatasetError("extractor small-cnn needs an image dataset")
    else:
        if train_split.is_image:
            raise DatasetError(f"extractor {cfg.extractor} needs feature vectors, got images")
        in_features = train_split.samples[0].input.shape[0]
    return ModelDims(in_features=in_features, hidden=cfg.hidden_dim, embed=cfg.embedding_dim,
                     classes=train_split.num_classes, extractor=cfg.extractor, dropout=cfg.dropout,
                     final_relu=cfg.final_relu)


def init_checkpoint(cfg: TrainConfig, dims: ModelDims, class_names, augment_cfg: AugmentConfig = AugmentConfig()
                    ) -> Checkpoint:
    params = init_params(dims, RngStream(cfg.seed, _MODEL))
    opt = AdamWState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                     no_decay=no_decay_set(params, cfg))
    return Checkpoint(cfg, augment_cfg, dims, tuple(class_names), params,
                      np.zeros((dims.classes, dims.embed)), opt)


def active_params(mode: str, params: dict) -> list[str]:
    """Parameters with a gradient path under ``mode``; nothing else is stepped or decayed."""
    heads = {"ce": ("cls.W", "cls.b"), "center": (), "arc": ("arc.W",), "arc+center": ("arc.W",)}[mode]
    return [k for k in params if k.startswith(("cnn.", "mlp.")) or k in heads]


def compute_loss(ckpt: Checkpoint, e: np.ndarray, labels: np.ndarray) -> tuple[LossOutput, dict[str, np.ndarray]]:
    """Loss for the configured mode plus gradients for the head parameters."""
    cfg = ckpt.train
    p = ckpt.params
    arc_params = ArcFaceParams(cfg.scale, cfg.margin)
    centers = ClassCenters(ckpt.centers, cfg.center_rate)
    if cfg.loss_mode == "ce":
        out = cross_entropy(classify(e, p["cls.W"], p["cls.b"]), labels)
        out.grad_embeddings = out.grad_logits @ p["cls.W"]
        return out, {"cls.W": out.grad_logits.T @ e, "cls.b": out.grad_logits.sum(axis=0)}
    if cfg.loss_mode == "center":
        return center_loss(e, centers, labels), {}
    if cfg.loss_mode == "arc":
        out = arcface_loss(e, p["arc.W"], labels, arc_params)
    else:
        out = dual_loss(e, p["arc.W"], labels, arc_params, centers, DualLossConfig(cfg.alpha))
    return out, {"arc.W": out.grad_weights}


def cnn_train_input(img: np.ndarray, cfg: AugmentConfig, stream: RngStream) -> np.ndarray:
    """Augmented image at pipeline resolution, then downscaled for the small CNN."""
    return resize_bilinear(augment(img, cfg, stream), CNN_INPUT)


def cnn_eval_input(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return resize_bilinear(eval_transform(img, cfg), CNN_INPUT)


class _Inputs:
    """Batch assembly for feature or image splits."""

    def __init__(self, split: DatasetSplit, ckpt: Checkpoint):
        self.split = split
        self.image = ckpt.dims.extractor == "small-cnn"
        self.aug = ckpt.augment
        self.seed = ckpt.train.seed
        self._eval_cache: np.ndarray | None = None
        self._features = None if self.image else split.feature_matrix()

    def train_batch(self, idx: np.ndarray, epoch: int) -> np.ndarray:
        if not self.image:
            return self._features[idx]
        base = RngStream(self.seed, _AUGMENT, epoch)
        return np.stack([cnn_train_input(self.split.samples[i].input, self.aug, base.derive(int(i))) for i in idx])

    def eval_all(self) -> np.ndarray:
        if not self.image:
            return self._features
        if self._eval_cache is None:
            self._eval_cache = np.stack([cnn_eval_input(s.input, self.aug) for s in self.split.samples])
        return self._eval_cache


def _check_split(ckpt: Checkpoint, split: DatasetSplit):
    if split.num_classes != ckpt.dims.classes:
        raise DimensionError(f"checkpoint has {ckpt.dims.classes} classes, dataset split has {split.num_classes}")
    if len(split) == 0:
        raise DatasetError(f"split {split.split!r} is empty")


def embed_split(ckpt: Checkpoint, split: DatasetSplit, inputs: _Inputs | None = None) -> np.ndarray:
    _check_split(ckpt, split)
    inputs = inputs or _Inputs(split, ckpt)
    model = EmbeddingModel(ckpt.dims, ckpt.params)
    x = inputs.eval_all()
    return np.concatenate([model.embed(x[i:i + EVAL_CHUNK]) for i in range(0, len(x), EVAL_CHUNK)])


def predict_logits(ckpt: Checkpoint, e: np.ndarray) -> np.ndarray:
    """Evaluation logits: margin-free scaled cosines in ArcFace modes, the affine head otherwise."""
    if ckpt.train.loss_mode in ("arc", "arc+center"):
        return cosine_logits(e, ckpt.params["arc.W"], ckpt.train.scale)
    return classify(e, ckpt.params["cls.W"], ckpt.params["cls.b"])


def evaluate(ckpt: Checkpoint, split: DatasetSplit, inputs: _Inputs | None = None
             ) -> tuple[np.ndarray, MetricsReport]:
    e = embed_split(ckpt, split, inputs)
    preds = np.argmax(predict_logits(ckpt, e), axis=1)  # first index wins ties
    cm = confusion_matrix(split.labels, preds, split.num_classes)
    return cm, metrics_from_confusion(cm)


def train(cfg: TrainConfig, splits: Sequence[DatasetSplit], augment_cfg: AugmentConfig = AugmentConfig(),
          resume: TrainResult | None = None,
          on_epoch: Callable[[EpochRecord, Checkpoint], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs; keep the checkpoint with the best validation accuracy (earliest on ties).

    ``resume`` continues from a previous result's ``last``/``checkpoint`` pair; the configuration must
    match it apart from ``epochs``.
    """
    train_split = splits[0]
    val_split = splits[1] if len(splits) > 1 else None
    if len(train_split) == 0:
        raise DatasetError("training split is empty")
    if resume is None:
        last = init_checkpoint(cfg, model_dims(cfg, train_split), train_split.class_names, augment_cfg)
        best = last.copy()
    else:
        if resume.last.train.replace(epochs=cfg.epochs) != cfg:
            raise ParameterError("resume configuration differs from the checkpoint beyond 'epochs'")
        last, best = resume.last.copy(), resume.checkpoint.copy()
        last.train = best.train = cfg
    if train_split.num_classes != last.dims.classes:
        raise DimensionError("training split class count does not match the model")

    model = EmbeddingModel(last.dims, last.params)
    inputs = _Inputs(train_split, last)
    val_inputs = _Inputs(val_split, last) if val_split is not None and len(val_split) else None
    labels_all = train_split.labels
    n = len(train_split)
    names = active_params(cfg.loss_mode, last.params)
    uses_centers = cfg.loss_mode in ("center", "arc+center")
    log_out = TrainLog()

    for epoch in range(last.epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = RngStream(cfg.seed, _SHUFFLE, epoch).permutation(n)
        batches = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            labels = labels_all[idx]
            out = None
            try:
                e, cache = model.forward(inputs.train_batch(idx, epoch), train=True,
                                         rng=RngStream(cfg.seed, _DROPOUT, epoch, b))
                out, head_grads = compute_loss(last, e, labels)
                if not math.isfinite(out.loss):
                    raise NumericError("loss is not finite")
                grads = model.backward(out.grad_embeddings, cache)
                grads.update(head_grads)
                adamw_step(last.params, {k: grads[k] for k in names}, last.optim)
            except NumericError as exc:
                comps = out.components if out is not None else {}
                raise NumericError(f"epoch {epoch}, batch {b}: {exc} (components {comps})") from None
            if uses_centers:
                last.centers = update_centers(ClassCenters(last.centers, cfg.center_rate), e, labels).centers
            batches.append({"n": len(idx), "loss": out.loss, **out.components})
        last.epoch = epoch
        total = sum(r["n"] for r in batches)
        loss = sum(r["loss"] * r["n"] for r in batches) / total
        comps = {k: sum(r[k] * r["n"] for r in batches) / total for k in batches[0] if k not in ("n", "loss")}
        val_acc = None
        if val_inputs is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            _, report = evaluate(last, val_split, val_inputs)
            val_acc = report.accuracy
            if val_acc > last.best_val_accuracy:
                last.best_val_accuracy, last.best_epoch = val_acc, epoch
                best = last.copy()
        elif val_inputs is None:
            best = last.copy()
        rec = EpochRecord(epoch, loss, comps, val_acc, time.perf_counter() - t0, batches)
        log_out.records.append(rec)
        log.info("epoch %d loss %.5f val_acc %s", epoch, loss, val_acc)
        if on_epoch is not None:
            on_epoch(rec, last)
    return TrainResult(best, last, log_out)


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    mode: str
    report: MetricsReport
    best_epoch: int
    val_accuracy: float


def run_ablation(base: TrainConfig, splits: Sequence[DatasetSplit], augment_cfg: AugmentConfig = AugmentConfig()
                 ) -> list[AblationRow]:
    """Train all four loss modes from the same seed and initialization; report test metrics."""
    test = splits[2] if len(splits) > 2 and len(splits[2]) else splits[-1]
    rows = []
    for mode in LOSS_MODES:
        res = train(base.replace(loss_mode=mode), splits, augment_cfg)
        _, report = evaluate(res.checkpoint, test)
        rows.append(AblationRow(mode, report, res.checkpoint.best_epoch, res.checkpoint.best_val_accuracy))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    lines = ["mode,precision,recall,f1,accuracy"]
    for r in rows:
        m = r.report
        lines.append(f"{r.mode},{100 * m.macro_precision:.2f},{100 * m.macro_recall:.2f},"
                     f"{100 * m.macro_f1:.2f},{100 * m.accuracy:.2f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# embedding geometry


@dataclass
class EmbeddingStats:
    class_means: np.ndarray
    intra_variance: np.ndarray  # per class, NaN for classes without samples
    pooled_variance: float
    min_center_angle: float
    notes: list[str]


def stats_from_embeddings(e: np.ndarray, labels: np.ndarray, num_classes: int) -> EmbeddingStats:
    """Compactness and separation of L2-normalized embeddings."""
    u = l2_normalize(e)
    means = np.full((num_classes, u.shape[1]), np.nan)
    var = np.full(num_classes, np.nan)
    notes = []
    sq_total = 0.0
    for k in range(num_classes):
        members = u[labels == k]
        if len(members) == 0:
            notes.append(f"class {k} has no samples; skipped")
            continue
        means[k] = members.mean(axis=0)
        sq = np.sum((members - means[k]) ** 2, axis=1)
        var[k] = float(sq.mean())
        sq_total += float(sq.sum())
    present = [k for k in range(num_classes) if not np.isnan(var[k])]
    angle = math.inf
    for i, a in enumerate(present):
        for b in present[i + 1:]:
            na, nb = np.linalg.norm(means[a]), np.linalg.norm(means[b])
            c = float(means[a] @ means[b]) / (na * nb)
            angle = min(angle, math.acos(min(1.0, max(-1.0, c))))
    return EmbeddingStats(means, var, sq_total / len(u), angle, notes)


def embedding_stats(ckpt: Checkpoint, split: DatasetSplit) -> EmbeddingStats:
    return stats_from_embeddings(embed_split(ckpt, split), split.labels, split.num_classes)
