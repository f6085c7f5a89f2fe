"""Run configuration: a TOML file whose tables mirror the library dataclasses.

Tables: ``[scene]`` (SceneSpec), ``[data]`` (split sizes), ``[detector]``
(DetectorSpec), ``[train]`` (TrainConfig), ``[kd]`` (KdConfig), ``[quant]``,
``[eval]`` and ``[paths]``.  Top-level keys ``name`` and ``seed``.  Unknown keys
are errors so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from .detector import DetectorSpec
from .distill import KdConfig
from .synthcorpus import SceneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 800
    n_val: int = 100
    n_test: int = 200
    workers: int = 1


@dataclass(frozen=True)
class QuantConfig:
    calibration_images: int = 64
    percentile: Optional[float] = None
    bits: int = 8


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    conf_threshold: float = 0.5
    ap_method: str = "all"


@dataclass(frozen=True)
class PathsConfig:
    corpus: str = "data/corpus"
    runs: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    seed: Optional[int] = None
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    kd: KdConfig = field(default_factory=KdConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to every stochastic component."""
        return replace(self, seed=seed, scene=replace(self.scene, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name}
        if self.seed is not None:
            out["seed"] = self.seed
        for f in fields(self):
            if f.name in ("name", "seed"):
                continue
            out[f.name] = _drop_none(asdict(getattr(self, f.name)))
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(_tomlable(self.to_dict()))


SECTIONS = {
    "scene": SceneSpec,
    "data": DataConfig,
    "detector": DetectorSpec,
    "train": TrainConfig,
    "kd": KdConfig,
    "quant": QuantConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def _tomlable(v):
    if isinstance(v, dict):
        return {k: _tomlable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_tomlable(x) for x in v]
    return v


def _coerce(cls, key: str, value):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ConfigError(f"unknown key {key!r} for [{_section_name(cls)}]")
    t = str(types[key])
    if isinstance(value, list) and "tuple" in t:
        return tuple(value)
    return value


def _section_name(cls) -> str:
    return next((k for k, v in SECTIONS.items() if v is cls), cls.__name__)


def _build(cls, table: dict):
    if not isinstance(table, dict):
        raise ConfigError(f"[{_section_name(cls)}] must be a table")
    kwargs = {k: _coerce(cls, k, v) for k, v in table.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{_section_name(cls)}]: {e}") from None


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    unknown = set(d) - set(SECTIONS) - {"name", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "name" in d:
        kwargs["name"] = str(d["name"])
    if "seed" in d:
        if not isinstance(d["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = d["seed"]
    for name, cls in SECTIONS.items():
        if name in d:
            kwargs[name] = _build(cls, d[name])
    cfg = RunConfig(**kwargs)
    return cfg.with_seed(cfg.seed) if cfg.seed is not None else cfg


def load(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    try:
        return from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (values parsed as TOML literals)."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 1:
            d[parts[0]] = _parse_value(raw)
        elif len(parts) == 2 and parts[0] in SECTIONS:
            d.setdefault(parts[0], {})[parts[1]] = _parse_value(raw)
        else:
            raise ConfigError(f"override key {key!r} must be 'key' or 'section.key'")
    return from_dict(d)
