"""Layered run configuration: defaults < YAML file < command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .detection import DetectionConfig
from .evaluation import DEFAULT_P
from .frontend import FrontendConfig
from .model import ConfigurationError, ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    p: float = DEFAULT_P


@dataclass(frozen=True)
class RunConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump({"config_hash": self.config_hash(), **self.to_dict()}, sort_keys=True))
        return path


SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_SECTION_CLS = {"frontend": FrontendConfig, "model": ModelConfig, "train": TrainConfig,
                "detection": DetectionConfig, "evaluation": EvalConfig}


def _coerce(cls, key, value):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigurationError(f"unknown option {cls.__name__}.{key}")
    default = getattr(cls(), key)
    if isinstance(value, str):
        value = yaml.safe_load(value)
    if isinstance(default, tuple) and isinstance(value, list):
        value = tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """``overrides`` maps dotted keys (``train.epochs``) to values or YAML strings."""
    merged = {name: {} for name in _SECTION_CLS}
    for source in (file_values or {}, _nest(overrides or {})):
        for section, values in source.items():
            if section == "config_hash":
                continue
            if section not in _SECTION_CLS:
                raise ConfigurationError(f"unknown config section {section!r}")
            for k, v in (values or {}).items():
                merged[section][k] = _coerce(_SECTION_CLS[section], k, v)
    try:
        return RunConfig(**{s: _SECTION_CLS[s](**vals) for s, vals in merged.items()})
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def _nest(dotted: dict) -> dict:
    out: dict = {}
    for key, value in dotted.items():
        section, _, name = key.partition(".")
        if not name:
            raise ConfigurationError(f"override {key!r} must look like section.option")
        out.setdefault(section, {})[name] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = yaml.safe_load(Path(path).read_text()) if path else {}
    return build_config(values or {}, overrides)
