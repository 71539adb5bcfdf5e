"""Experiment configuration: a sectioned TOML file mapped onto dataclasses.

Every key has a default except ``fl.rounds`` and the ``[dataset]`` section
itself. Unknown keys and type mismatches raise ConfigError with the dotted
key path.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError

_REQUIRED = object()


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    classes: int = 10
    dim: int = 32
    per_class: int = 500
    test_per_class: int = 100
    center_spread: float = 4.0
    noise_sigma: float = 1.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class PartitionConfig:
    scheme: str = "lda"
    clients: int = 10
    alpha: float = 0.1
    samples_per_client: int = 500
    dominant_count: int = 4950
    tail_count_low: int = 5
    tail_count_high: int = 6


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "relu"


@dataclass
class FlConfig:
    rounds: int = _REQUIRED  # type: ignore[assignment]
    strategy: str = "fedavg"
    epochs: int = 1
    clients_per_round: int = 0  # 0 -> 5 for K <= 10, else 10
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.992
    batch_size: int = 128
    fedprox_mu: float = 0.1
    workers: int = 1
    target_accuracy: typing.Optional[float] = None
    target_from_baseline: bool = True


@dataclass
class VhlSection:
    mode: str = "off"
    lam: float = 1.0
    calibration_layer: int = -1
    virtual_batch_size: int = 0  # 0 -> same as fl.batch_size
    detach_virtual: bool = True
    ce_weighting: str = "joint_mean"
    temperature: float = 0.07


@dataclass
class VirtualConfig:
    classes: int = 0  # 0 -> dataset classes
    per_class: int = 100
    base_side: int = 0  # 0 -> derived from the input dim
    up_factor: int = 0
    channels: int = 0
    mean_separation: float = 10.0
    sigma: float = 1.0


@dataclass
class OutputConfig:
    metrics: str = "metrics.csv"
    summary: str = ""
    features_dir: str = ""
    feature_rounds: list[int] = field(default_factory=list)
    feature_layer: int = -1


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = _REQUIRED  # type: ignore[assignment]
    fl: FlConfig = _REQUIRED  # type: ignore[assignment]
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    vhl: VhlSection = field(default_factory=VhlSection)
    virtual: VirtualConfig = field(default_factory=VirtualConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seeds: list[int] = field(default_factory=lambda: [0])

    def clients_per_round(self) -> int:
        if self.fl.clients_per_round > 0:
            return self.fl.clients_per_round
        return 5 if self.partition.clients <= 10 else 10

    def virtual_batch_size(self) -> int:
        return self.vhl.virtual_batch_size or self.fl.batch_size


_CHOICES = {
    "dataset.source": ("synthetic", "idx"),
    "partition.scheme": ("lda", "two_class", "subset"),
    "model.activation": ("relu", "tanh"),
    "fl.strategy": ("fedavg", "fedprox", "scaffold", "fednova"),
    "vhl.mode": ("full", "naive", "vfa", "off"),
    "vhl.ce_weighting": ("joint_mean", "separate_mean"),
}


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path)
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected bool, got {type(value).__name__} {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected int, got {type(value).__name__} {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected float, got {type(value).__name__} {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected str, got {type(value).__name__} {value!r}", path)
        return value
    raise ConfigError(f"unsupported schema type {_type_name(tp)}", path)


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError("expected a table", prefix or None)
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError("unknown key", f"{prefix}{unknown[0]}")
    kwargs = {}
    for name, f in known.items():
        path = f"{prefix}{name}"
        tp = hints[name]
        if name not in raw:
            if f.default is _REQUIRED:
                raise ConfigError("missing required key", path)
            continue
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, raw[name], f"{path}.")
        else:
            kwargs[name] = _coerce(raw[name], tp, path)
            if path in _CHOICES and kwargs[name] not in _CHOICES[path]:
                raise ConfigError(f"must be one of {list(_CHOICES[path])}, got {kwargs[name]!r}", path)
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig):
    checks = [
        (cfg.fl.rounds >= 0, "fl.rounds", "must be >= 0"),
        (cfg.fl.epochs >= 1, "fl.epochs", "must be >= 1"),
        (cfg.fl.base_lr > 0, "fl.base_lr", "must be positive"),
        (0 <= cfg.fl.momentum < 1, "fl.momentum", "must lie in [0, 1)"),
        (cfg.fl.weight_decay >= 0, "fl.weight_decay", "must be >= 0"),
        (cfg.fl.batch_size >= 1, "fl.batch_size", "must be >= 1"),
        (cfg.fl.workers >= 1, "fl.workers", "must be >= 1"),
        (cfg.partition.clients >= 1, "partition.clients", "must be >= 1"),
        (cfg.partition.alpha > 0, "partition.alpha", "must be positive"),
        (cfg.vhl.lam >= 0, "vhl.lam", "must be >= 0"),
        (cfg.vhl.temperature > 0, "vhl.temperature", "must be positive"),
        (len(cfg.model.hidden) >= 1 and all(h >= 1 for h in cfg.model.hidden), "model.hidden",
         "needs at least one positive width"),
        (len(cfg.seeds) >= 1, "seeds", "needs at least one seed"),
    ]
    for ok, path, msg in checks:
        if not ok:
            raise ConfigError(msg, path)
    if cfg.dataset.source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg.dataset, key):
                raise ConfigError("required when dataset.source = 'idx'", f"dataset.{key}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    _validate(cfg)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from exc
    return config_from_dict(raw)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML: {exc}", str(path)) from exc
    return config_from_dict(raw)


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _drop_none(dataclasses.asdict(cfg))


def serialize_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))
