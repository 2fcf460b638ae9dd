"""Pipeline configuration: one JSON section per stage."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .anchor import GridSpec
from .augment import AugmentPolicy
from .errors import ConfigError
from .ingest import GroundConfig
from .optim import OptimConfig


@dataclass
class IngestConfig:
    ground: GroundConfig = field(default_factory=GroundConfig)
    normals_k: int = 16
    sample_n: int = 8192
    front_view: bool = False

    def validate(self):
        g = self.ground
        if self.normals_k < 3 or self.sample_n < 1 or g.iterations < 1 or g.threshold <= 0:
            raise ConfigError(f"invalid ingest config: {self}")
        return self


@dataclass
class LabelConfig:
    threshold: float = 0.5
    out_dir: str = "labels"

    def validate(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("labelgen.threshold must lie in [0, 1]")
        return self


@dataclass
class PipelineConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    anchor: GridSpec = field(default_factory=GridSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    labelgen: LabelConfig = field(default_factory=LabelConfig)
    workers: int = 1
    seed: int = 0

    def validate(self):
        try:
            self.ingest.validate()
            self.anchor.validate()
            self.optim.validate()
            self.augment.validate()
            self.labelgen.validate()
        except ConfigError:
            raise
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return _build(cls, data, "").validate()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


def _coerce(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or (len(default) == 3 and len(value) != 3):
            raise ConfigError(f"{path}: expected a list of numbers")
        return tuple(float(v) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    base = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or '<root>'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name in names:
        default = getattr(base, name)
        sub = f"{path}.{name}" if path else name
        if name not in data:
            kwargs[name] = default
        elif dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), data[name], sub)
        else:
            kwargs[name] = _coerce(default, data[name], sub)
    return cls(**kwargs)
