"""Run configuration: one TOML file, strict keys, flag and environment overrides.

Sections map onto dataclasses::

    [data]          DataConfig
    [train]         TrainConfig
    [grid]          GridConfig      ([grid.hash] -> HashGridConfig)
    [neural]        NeuralConfig    ([neural.bank] -> BankConfig)

Environment variables named ``TINERF_<SECTION>__<KEY>`` (nested sections
joined by ``__``) override file values, e.g. ``TINERF_TRAIN__ITERS=100`` or
``TINERF_GRID__HASH__LEVELS=8``.  Values are parsed as TOML literals and
fall back to plain strings.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .data import SynthSpec
from .hashgrid import HashGridConfig
from .keyframes import BankConfig
from .models import GridConfig, NeuralConfig
from .training import TrainConfig

ENV_PREFIX = "TINERF_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = ""
    background: tuple = (0.0, 0.0, 0.0)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    neural: NeuralConfig = field(default_factory=NeuralConfig)
    out: str = "run"

    def model_config(self):
        return self.grid if self.train.representation == "grid" else self.neural


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key!r}; "
                              f"allowed: {sorted(fields)}")
        default = _default(fields[key])
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), val, f"{where}.{key}" if where else key)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(val) if isinstance(val, (list, tuple)) else val
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _set(raw: dict, path: list, value):
    node = raw
    for k in path[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-table {'.'.join(path)}")
    node[path[-1]] = value


def _literal(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    raw = {}
    for name, text in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if path:
            _set(raw, path, _literal(text))
    return raw


def merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """File (optional) <- environment <- explicit overrides, then validate."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{p}: {e}") from e
    raw = merge(raw, env_overrides(environ))
    raw = merge(raw, overrides or {})
    return _build(RunConfig, raw, "")


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, "")


def synth_spec(raw: dict) -> SynthSpec:
    return _build(SynthSpec, raw, "synth")


__all__ = ["RunConfig", "DataConfig", "ConfigError", "load_config", "to_dict", "from_dict",
           "HashGridConfig", "BankConfig", "GridConfig", "NeuralConfig", "TrainConfig"]
