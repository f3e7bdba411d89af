"""Run configuration: TOML files validated against per-experiment defaults.

A config file has the sections ``[run]``, ``[model]``, ``[integrator]``,
``[penalty]``, ``[thermostat]`` and ``[params]``.  Every key must already
exist in the defaults of the chosen experiment (``[params]`` holds the
experiment-specific knobs); unknown sections or keys are rejected.
"""
from __future__ import annotations

import copy
import dataclasses
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

SECTIONS = ("run", "model", "integrator", "penalty", "thermostat", "params")
RUN_KEYS = ("experiment", "seed", "replicas", "steps", "burn_in", "thinning", "output", "threads")


@dataclass
class RunConfig:
    experiment: str
    seed: int = 0
    replicas: int = 1
    steps: int = 1
    burn_in: int = 0
    thinning: int = 1
    output: str = "out"
    threads: int = 1
    model: dict = field(default_factory=dict)
    integrator: dict = field(default_factory=dict)
    penalty: dict = field(default_factory=dict)
    thermostat: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        run = {k: d.pop(k) for k in RUN_KEYS}
        return {"run": run, **d}

    def with_overrides(self, **run_keys) -> "RunConfig":
        """Copy with some [run] keys replaced (None values are ignored)."""
        kw = {k: v for k, v in run_keys.items() if v is not None}
        unknown = set(kw) - set(RUN_KEYS)
        if unknown:
            raise ConfigError(f"unknown run keys {sorted(unknown)}")
        return dataclasses.replace(copy.deepcopy(self), **kw)


def _check_type(where, key, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}.{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{key}: expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{where}.{key}: expected an integer, got {value!r}")
            return int(value)
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}.{key}: expected a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where}.{key}: expected a list, got {value!r}")
    return value


def merge(defaults: RunConfig, data: dict) -> RunConfig:
    """Overlay parsed TOML ``data`` on ``defaults`` with strict key checking."""
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    cfg = copy.deepcopy(defaults)
    for key, value in data.get("run", {}).items():
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown key run.{key}")
        if key == "experiment" and value != defaults.experiment:
            raise ConfigError(f"config is for experiment {value!r}, not {defaults.experiment!r}")
        setattr(cfg, key, _check_type("run", key, getattr(defaults, key), value))
    for sec in SECTIONS[1:]:
        target = getattr(cfg, sec)
        for key, value in data.get(sec, {}).items():
            if key not in target:
                raise ConfigError(f"unknown key {sec}.{key}")
            target[key] = _check_type(sec, key, target[key], value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.replicas < 1 or cfg.steps < 0 or cfg.burn_in < 0 or cfg.thinning < 1 or cfg.threads < 1:
        raise ConfigError("replicas, thinning and threads must be >= 1; steps and burn_in >= 0")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    th = cfg.thermostat
    if "beta" in th and not th["beta"] > 0:
        raise ConfigError("thermostat.beta must be positive")
    for k in ("gamma", "gamma_z"):
        if k in th and th[k] < 0:
            raise ConfigError(f"thermostat.{k} must be nonnegative")
    if "dt" in cfg.integrator and not cfg.integrator["dt"] > 0:
        raise ConfigError("integrator.dt must be positive")
    if cfg.penalty.get("nu") is not None and cfg.penalty["nu"] < 0:
        raise ConfigError("penalty.nu must be nonnegative")


def load_config(path, defaults: RunConfig) -> RunConfig:
    with open(path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return merge(defaults, data)


def dump_toml(cfg: RunConfig) -> str:
    """Serialize a config back to TOML (flat sections, scalar and list values)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, float):
            return repr(v) if v == v and abs(v) != float("inf") else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
        return str(v)

    lines = []
    for sec, body in cfg.as_dict().items():
        lines.append(f"[{sec}]")
        lines += [f"{k} = {fmt(v)}" for k, v in body.items() if v is not None]
        lines.append("")
    return "\n".join(lines)
