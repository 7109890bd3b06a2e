"""Training configuration and the flat ``key = value`` config file format.

Keys are namespaced: ``train.*`` (TrainConfig), ``augment.*`` (AugmentConfig),
``synth.*`` (SynthConfig) and ``data.*`` (DataConfig). Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from importlib import resources

from .data.augment import AugmentConfig
from .data.synth import SynthConfig
from .errors import ConfigError, ParameterError

LOSS_MODES = ("ce", "center", "arc", "arc+center")


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "arc+center"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    dropout: float = 0.5
    scale: float = 30.0
    margin: float = 0.5
    alpha: float = 0.5
    center_rate: float = 0.5
    seed: int = 0
    extractor: str = "precomputed"
    embedding_dim: int = 256
    hidden_dim: int = 512
    eval_every: int = 1
    final_relu: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_biases: bool = False

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ParameterError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ParameterError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.lr <= 0 or self.weight_decay < 0 or self.alpha < 0:
            raise ParameterError("lr > 0, weight_decay >= 0 and alpha >= 0 required")
        if not 0 < self.center_rate <= 1:
            raise ParameterError("center_rate must lie in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ParameterError("dropout must lie in [0, 1)")
        if not (self.scale > 0 and 0 <= self.margin < math.pi):
            raise ParameterError("scale > 0 and 0 <= margin < pi required")
        if self.seed < 0:
            raise ParameterError("seed must be non-negative")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class DataConfig:
    source: str = ""  # synth | features | images
    path: str = ""
    skip_bad: bool = False


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = {"train": TrainConfig, "augment": AugmentConfig, "synth": SynthConfig, "data": DataConfig}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(p) for p in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_assignments(lines, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (p.strip() for p in text.split("=", 1))
        out[key] = value
    return out


def build_config(assignments: dict[str, str]) -> RunConfig:
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, raw in assignments.items():
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None or name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown config key {key!r}")
        default = next(f.default for f in fields(cls) if f.name == name)
        values[section][name] = _coerce(raw, default, key)
    try:
        return RunConfig(**{name: cls(**values[name]) for name, cls in _SECTIONS.items()})
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    assignments: dict[str, str] = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                assignments.update(parse_assignments(fh, path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    assignments.update(overrides or {})
    return build_config(assignments)


def table2_path():
    return resources.files("dualloss").joinpath("table2.cfg")


def to_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
