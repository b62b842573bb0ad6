"""Run configuration: one JSON document with a section per component.

Keys use the symbols of the method (``M``, ``N``, ``p_dt_fp``, ``r_dt``,
``n_buffer``, ``gamma`` ...) so published parameter tables can be copied in
directly. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .dqn import NetworkSpec, TrainConfig
from .env import EnvConfig
from .field_sim import FieldConfig, NoiseConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    n_fields: int = 1000
    seed: int = 0
    rotations_deg: tuple = (0.0, 90.0, 180.0, 270.0)
    recall_steps: tuple = (200, 400, 600, 800)
    obs_threshold: float = 0.5
    prior_threshold: float = 0.05
    N_pk: int = 48
    include_prior_flight: bool = False
    coverage_corner: str = "NW"


@dataclass
class RunConfig:
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    noise: NoiseConfig = dc_field(default_factory=NoiseConfig)
    env: EnvConfig = dc_field(default_factory=EnvConfig)
    network: NetworkSpec = dc_field(default_factory=NetworkSpec)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    eval: EvalConfig = dc_field(default_factory=EvalConfig)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        try:
            self.field.validate(self.env.N)
            self.noise.validate()
            self.env.validate()
            self.network.validate()
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def scenario(self):
        from .rollout import SimScenario

        return SimScenario(self.field, self.noise, self.env)


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


def _coerce(name: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected list, got {value!r}")
        return _tupleize(value)
    return value


def _section(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(f"{where}.{k}", getattr(defaults, k), v) for k, v in data.items()}
    return cls(**kwargs)


SECTIONS = {"field": FieldConfig, "noise": NoiseConfig, "env": EnvConfig,
            "network": NetworkSpec, "train": TrainConfig, "eval": EvalConfig}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS) - {"schema_version"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    cfg = RunConfig(**{k: _section(cls, data.get(k, {}), k) for k, cls in SECTIONS.items()})
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_json(), indent=2) + "\n")
