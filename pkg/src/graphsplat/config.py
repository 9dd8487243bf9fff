"""JSON run configuration.

A config file is a JSON object whose keys are the field names of the config
dataclasses. Keys may sit at the top level or inside a section named after
the dataclass (``"train"``, ``"init"``, ``"graph"``, ``"loss"``,
``"voxelize"``). Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, InvalidParameterError
from .fbp import InitConfig
from .graph import GraphConfig
from .losses import LossWeights
from .trainer import TrainConfig
from .voxelizer import VoxelizeConfig

SECTIONS = {
    "train": TrainConfig,
    "init": InitConfig,
    "graph": GraphConfig,
    "loss": LossWeights,
    "voxelize": VoxelizeConfig,
}


def _field_owner():
    """Map each flat key to the section that owns it.

    ``confidence`` and ``seed`` appear in several dataclasses; a flat key
    sets every section that has it.
    """
    owners = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            owners.setdefault(f.name, []).append(section)
    return owners


FIELD_OWNERS = _field_owner()


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    init: InitConfig = field(default_factory=InitConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    voxelize: VoxelizeConfig = field(default_factory=VoxelizeConfig)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return config_from_dict(overrides, base=self)

    def to_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _split_keys(data: dict):
    per_section = {name: {} for name in SECTIONS}
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a JSON object")
            allowed = {f.name for f in fields(SECTIONS[key])}
            for k, v in value.items():
                if k not in allowed:
                    raise ConfigError(f"unknown key {key}.{k}")
                per_section[key][k] = v
        elif key in FIELD_OWNERS:
            for section in FIELD_OWNERS[key]:
                per_section[section].setdefault(key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return per_section


def _coerce(cls, values):
    out = {}
    types = {f.name: f.type for f in fields(cls)}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        if "float" in str(types[k]) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        out[k] = v
    return out


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    base = base or RunConfig()
    parts = {}
    for section, values in _split_keys(data).items():
        current = getattr(base, section)
        try:
            parts[section] = replace(current, **_coerce(SECTIONS[section], values))
        except (InvalidParameterError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section} config: {exc}") from exc
    return RunConfig(**parts)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = config_from_dict(data, cfg)
    if overrides:
        cfg = config_from_dict(overrides, cfg)
    return cfg
