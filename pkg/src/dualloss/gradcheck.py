"""Randomized finite-difference audit of every analytic gradient in the engine."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError
from .losses import (ArcFaceParams, ClassCenters, DualLossConfig, arcface_loss, center_loss, cross_entropy,
                     dual_loss)
from .model import EmbeddingModel, ModelDims, init_params
from .optim import grad_check
from .tensor import RngStream

COMPONENTS = ("ce", "arc", "center", "dual", "mlp", "cnn")
SWITCH_GUARD = 1e-3
CNN_COORDS = 40
_TAGS = {name: 100 + i for i, name in enumerate(COMPONENTS)}


@dataclass
class ComponentReport:
    name: str
    max_rel_error: float = 0.0
    trial: int | None = None
    coordinate: str | None = None  # block holding the worst error
    worst_entry: str | None = None  # its worst single coordinate
    max_coord_error: float = 0.0
    checked: int = 0
    skipped: int = 0
    seconds: float = 0.0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


class _Packer:
    """Flatten a dict of arrays into one vector and back, in a fixed key order."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.keys = list(arrays)
        self.shapes = [arrays[k].shape for k in self.keys]
        self.sizes = [int(np.prod(s)) for s in self.shapes]

    def pack(self, arrays) -> np.ndarray:
        return np.concatenate([np.asarray(arrays[k], dtype=np.float64).ravel() for k in self.keys])

    def unpack(self, vec) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for k, shape, size in zip(self.keys, self.shapes, self.sizes):
            out[k] = vec[off:off + size].reshape(shape)
            off += size
        return out

    def blocks(self) -> dict[str, slice]:
        out, off = {}, 0
        for k, size in zip(self.keys, self.sizes):
            out[k] = slice(off, off + size)
            off += size
        return out

    def name(self, index: int) -> str:
        off = 0
        for k, shape, size in zip(self.keys, self.shapes, self.sizes):
            if index < off + size:
                return f"{k}{[int(i) for i in np.unravel_index(index - off, shape)]}"
            off += size
        return str(index)


def _dims(rng: RngStream):
    return int(rng.integers(1, 9)), int(rng.integers(2, 17)), int(rng.integers(2, 7))


def _arc_params(rng: RngStream) -> ArcFaceParams:
    return ArcFaceParams(scale=float(rng.uniform(1.0, 30.0)), margin=float(rng.uniform(0.0, 1.0)))


def _near_switch(e, w, labels, params: ArcFaceParams) -> bool:
    en = e / np.linalg.norm(e, axis=1, keepdims=True)
    wn = w / np.linalg.norm(w, axis=1, keepdims=True)
    cos = np.clip(np.sum(en * wn[labels], axis=1), -1.0, 1.0)
    return bool(np.any(np.abs(np.arccos(cos) - (math.pi - params.margin)) < SWITCH_GUARD))


def _arc_instance(rng: RngStream):
    while True:
        n, d, c = _dims(rng)
        e = rng.normal(0.0, 1.0, (n, d))
        w = rng.normal(0.0, 1.0, (c, d))
        labels = rng.integers(0, c, n)
        params = _arc_params(rng)
        if not _near_switch(e, w, labels, params):
            return e, w, labels, params


def _record(rep: ComponentReport, res, trial: int, packer: _Packer | None):
    rep.checked += res.checked
    rep.skipped += res.skipped
    rep.max_coord_error = max(rep.max_coord_error, res.max_coord_error)
    if res.worst_block is not None and res.max_rel_error >= rep.max_rel_error:
        rep.max_rel_error = res.max_rel_error
        rep.trial = trial
        rep.coordinate = res.worst_block
        if res.worst_index is not None:
            rep.worst_entry = packer.name(res.worst_index) if packer else f"[{res.worst_index}]"


def _ce(rng, perturb):
    n, _, c = _dims(rng)
    logits = rng.normal(0.0, 3.0, (n, c))
    labels = rng.integers(0, c, n)
    g = cross_entropy(logits, labels).grad_logits * perturb
    return grad_check(lambda v: cross_entropy(v.reshape(n, c), labels).loss, g, logits), None


def _arc(rng, perturb):
    e, w, labels, params = _arc_instance(rng)
    out = arcface_loss(e, w, labels, params)
    pk = _Packer({"embeddings": e, "weights": w})

    def f(v):
        a = pk.unpack(v)
        out = arcface_loss(a["embeddings"], a["weights"], labels, params)
        return out.loss, out.margin_branch.tobytes()

    g = pk.pack({"embeddings": out.grad_embeddings * perturb, "weights": out.grad_weights})
    return grad_check(f, g, pk.pack({"embeddings": e, "weights": w}), blocks=pk.blocks()), pk


def _center(rng, perturb):
    n, d, c = _dims(rng)
    e = rng.normal(0.0, 1.0, (n, d))
    centers = ClassCenters(rng.normal(0.0, 1.0, (c, d)))
    labels = rng.integers(0, c, n)
    g = center_loss(e, centers, labels).grad_embeddings * perturb
    return grad_check(lambda v: center_loss(v.reshape(n, d), centers, labels).loss, g, e), None


def _dual(rng, perturb):
    e, w, labels, params = _arc_instance(rng)
    centers = ClassCenters(rng.normal(0.0, 1.0, (w.shape[0], e.shape[1])))
    cfg = DualLossConfig(float(rng.uniform(0.0, 1.0)))
    out = dual_loss(e, w, labels, params, centers, cfg)
    pk = _Packer({"embeddings": e, "weights": w})

    def f(v):
        a = pk.unpack(v)
        out = dual_loss(a["embeddings"], a["weights"], labels, params, centers, cfg)
        return out.loss, out.margin_branch.tobytes()

    g = pk.pack({"embeddings": out.grad_embeddings * perturb, "weights": out.grad_weights})
    return grad_check(f, g, pk.pack({"embeddings": e, "weights": w}), blocks=pk.blocks()), pk


def _pipeline_check(rng, perturb, dims: ModelDims, x, train: bool, coords_from=None):
    """Gradient of dual loss w.r.t. every model parameter through extractor and MLP."""
    labels = rng.integers(0, dims.classes, x.shape[0])
    params = init_params(dims, rng.derive(1))
    for k in params:
        if k.rsplit(".", 1)[-1].startswith("b"):
            params[k] = rng.normal(0.0, 0.1, params[k].shape)
    keep = {k: v for k, v in params.items() if not k.startswith("cls.")}
    arc = ArcFaceParams(scale=float(rng.uniform(1.0, 30.0)), margin=float(rng.uniform(0.0, 1.0)))
    centers = ClassCenters(rng.normal(0.0, 0.5, (dims.classes, dims.embed)))
    cfg = DualLossConfig(float(rng.uniform(0.0, 1.0)))
    drop = rng.derive(2)
    pk = _Packer(keep)

    def forward(p):
        model = EmbeddingModel(dims, p)
        stream = RngStream(drop.seed, *drop.stream_id) if train else None
        e, cache = model.forward(x, train=train, rng=stream)
        return model, e, cache

    def f(v):
        p = pk.unpack(v)
        _, e, (ext, mlp) = forward(p)
        out = dual_loss(e, p["arc.W"], labels, arc, centers, cfg)
        parts = [np.packbits(mlp["pre1"] > 0).tobytes(), np.packbits(mlp["pre2"] > 0).tobytes(),
                 out.margin_branch.tobytes()]
        if ext is not None:
            caches, _ = ext
            for _, pre, (_, arg) in caches:
                parts += [np.packbits(pre > 0).tobytes(), arg.astype(np.int8).tobytes()]
        return out.loss, b"".join(parts)

    model, e, cache = forward(keep)
    out = dual_loss(e, keep["arc.W"], labels, arc, centers, cfg)  # raises on all-zero embeddings
    if _near_switch(e, keep["arc.W"], labels, arc):
        return None, pk
    grads = model.backward(out.grad_embeddings, cache)
    grads["arc.W"] = out.grad_weights
    first = next(k for k in pk.keys if k.startswith(("cnn.", "mlp.")))
    grads[first] = grads[first] * perturb
    coords = None
    if coords_from is not None:
        coords = coords_from(pk)
    return grad_check(f, pk.pack(grads), pk.pack(keep), coords=coords, blocks=pk.blocks()), pk


def _mlp(rng, perturb):
    dims = ModelDims(in_features=8, hidden=16, embed=8, classes=3, extractor="identity", dropout=0.5)
    x = rng.normal(0.0, 1.0, (int(rng.integers(1, 9)), 8))
    return _pipeline_check(rng, perturb, dims, x, train=True)


def _cnn(rng, perturb):
    dims = ModelDims(in_features=32, hidden=16, embed=8, classes=3, extractor="small-cnn", dropout=0.0)
    x = rng.normal(0.0, 1.0, (int(rng.integers(1, 3)), 3, 8, 8))
    pick = rng.derive(3)

    def coords(pk: _Packer):
        n_cnn = sum(s for k, s in zip(pk.keys, pk.sizes) if k.startswith("cnn."))
        total = sum(pk.sizes)
        a = pick.permutation(n_cnn)[: CNN_COORDS * 3 // 4]
        b = n_cnn + pick.permutation(total - n_cnn)[: CNN_COORDS // 4]
        return sorted(int(i) for i in np.concatenate([a, b]))

    return _pipeline_check(rng, perturb, dims, x, train=False, coords_from=coords)


_RUNNERS = {"ce": _ce, "arc": _arc, "center": _center, "dual": _dual, "mlp": _mlp, "cnn": _cnn}


def run_gradcheck(seed: int = 0, trials: int = 100, perturb: str | None = None,
                  components=COMPONENTS) -> dict[str, ComponentReport]:
    """Check each component on ``trials`` seeded random instances.

    ``perturb`` names a component whose analytic gradient is scaled by
    1.01 before comparison; used to confirm the harness can fail.
    """
    reports = {}
    for name in components:
        rep = ComponentReport(name)
        factor = 1.01 if perturb == name else 1.0
        t0 = time.perf_counter()
        for trial in range(trials):
            rng = RngStream(seed, _TAGS[name], trial)
            for attempt in range(20):
                try:
                    res, pk = _RUNNERS[name](rng.derive(attempt), factor)
                except DegenerateInputError:
                    continue
                if res is not None:
                    break
            else:
                continue
            _record(rep, res, trial, pk)
        rep.seconds = time.perf_counter() - t0
        reports[name] = rep
    return reports
