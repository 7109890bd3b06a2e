"""MCK1 checkpoint files.

Little-endian layout::

    b"MCK1" | u32 version
    u32 len | config JSON (utf-8, sorted keys)
    u32 count | count * (u32 len | utf-8 class name)
    u32 sections | sections * (u32 len | name | u32 rank | rank * u32 extent | float64 payload)

Sections are written in sorted name order. Scalars (epoch, optimizer step,
best validation accuracy) are rank-0 sections. Payloads are float64 so a
reloaded run continues bit-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig, to_dict
from .data.augment import AugmentConfig
from .errors import FormatError, VersionError
from .model import ModelDims, is_bias
from .optim import AdamWState

MAGIC = b"MCK1"
VERSION = 1


@dataclass
class Checkpoint:
    train: TrainConfig
    augment: AugmentConfig
    dims: ModelDims
    class_names: tuple[str, ...]
    params: dict[str, np.ndarray]
    centers: np.ndarray
    optim: AdamWState
    epoch: int = 0
    best_val_accuracy: float = -1.0
    best_epoch: int = 0
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        opt = AdamWState(lr=self.optim.lr, beta1=self.optim.beta1, beta2=self.optim.beta2, eps=self.optim.eps,
                         weight_decay=self.optim.weight_decay, t=self.optim.t,
                         m={k: v.copy() for k, v in self.optim.m.items()},
                         v={k: v.copy() for k, v in self.optim.v.items()}, no_decay=self.optim.no_decay)
        return Checkpoint(self.train, self.augment, self.dims, tuple(self.class_names),
                          {k: v.copy() for k, v in self.params.items()}, self.centers.copy(), opt,
                          self.epoch, self.best_val_accuracy, self.best_epoch,
                          {k: v.copy() for k, v in self.extra.items()})

    def config_blob(self) -> dict:
        dims = to_dict(self.dims)
        return {"train": to_dict(self.train), "augment": to_dict(self.augment), "model": dims}

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v for k, v in self.params.items()}
        out["state.centers"] = self.centers
        for k, v in self.optim.m.items():
            out[f"optim.m.{k}"] = v
        for k, v in self.optim.v.items():
            out[f"optim.v.{k}"] = v
        out["optim.t"] = np.array(float(self.optim.t))
        out["meta.epoch"] = np.array(float(self.epoch))
        out["meta.best_epoch"] = np.array(float(self.best_epoch))
        out["meta.best_val_accuracy"] = np.array(float(self.best_val_accuracy))
        out.update({f"extra.{k}": v for k, v in self.extra.items()})
        return out


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _u32(VERSION)]
    blob = json.dumps(ckpt.config_blob(), sort_keys=True).encode("utf-8")
    parts += [_u32(len(blob)), blob, _u32(len(ckpt.class_names))]
    for name in ckpt.class_names:
        b = name.encode("utf-8")
        parts += [_u32(len(b)), b]
    tensors = ckpt.tensors()
    parts.append(_u32(len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        b = name.encode("utf-8")
        parts += [_u32(len(b)), b, _u32(arr.ndim)] + [_u32(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes, origin: str):
        self.data, self.pos, self.origin = data, 0, origin

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.origin}: truncated at offset {self.pos} reading {what} "
                              f"({n} bytes needed, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(data: bytes, origin: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, origin)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{origin}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise VersionError(f"{origin}: checkpoint format version {version}, this build reads version {VERSION}")
    try:
        blob = json.loads(r.take(r.u32("config length"), "config").decode("utf-8"))
        train = TrainConfig(**blob["train"])
        aug = blob["augment"]
        augment = AugmentConfig(**{**aug, "mean": tuple(aug["mean"]), "std": tuple(aug["std"])})
        dims = ModelDims(**blob["model"])
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"{origin}: invalid config blob ending at offset {r.pos}: {exc}") from None
    names = []
    for i in range(r.u32("class count")):
        names.append(r.take(r.u32(f"class name {i} length"), f"class name {i}").decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for i in range(r.u32("section count")):
        name = r.take(r.u32(f"section {i} name length"), f"section {i} name").decode("utf-8")
        rank = r.u32(f"{name} rank")
        shape = tuple(r.u32(f"{name} extent") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * count, f"{name} payload")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise FormatError(f"{origin}: {len(data) - r.pos} trailing bytes at offset {r.pos}")
    try:
        params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
        opt = AdamWState(lr=train.lr, beta1=train.beta1, beta2=train.beta2, eps=train.adam_eps,
                         weight_decay=train.weight_decay, t=int(tensors["optim.t"]),
                         m={k[len("optim.m."):]: v for k, v in tensors.items() if k.startswith("optim.m.")},
                         v={k[len("optim.v."):]: v for k, v in tensors.items() if k.startswith("optim.v.")},
                         no_decay=no_decay_set(params, train))
        return Checkpoint(train, augment, dims, tuple(names), params, tensors["state.centers"], opt,
                          epoch=int(tensors["meta.epoch"]), best_val_accuracy=float(tensors["meta.best_val_accuracy"]),
                          best_epoch=int(tensors["meta.best_epoch"]),
                          extra={k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")})
    except KeyError as exc:
        raise FormatError(f"{origin}: missing section {exc.args[0]!r}") from None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), str(path))


def no_decay_set(params, train: TrainConfig) -> frozenset[str]:
    return frozenset() if train.decay_biases else frozenset(k for k in params if is_bias(k))
