"""Flat ``key=value`` experiment configs.

One assignment per line, ``#`` starts a comment. Trainer fields are bare
keys (``learning_rate=0.05``); nested configs use a dotted prefix
(``upl.alpha=1.0``, ``ic.tau=0.1``, ``bank.capacity=256``,
``mining.method=max_entropy``) and the synthetic world uses ``world.``.
Tuples are comma separated, ``world.cluster_means`` takes rows split by
``;``. Environment variables are never consulted.
"""
from __future__ import annotations

import dataclasses
import enum
from pathlib import Path

import numpy as np

from .losses import ICConfig, UPLConfig
from .memory_bank import MemoryBankConfig
from .mining import MiningConfig
from .trainer import SyntheticWorldConfig, TrainerConfig

REQUIRED_KEYS = ("total_iterations", "upl.beta", "ic.gamma_0")

SECTIONS = {"upl": UPLConfig, "ic": ICConfig, "bank": MemoryBankConfig, "mining": MiningConfig}


class ConfigError(ValueError):
    pass


def parse_flat(text: str, where: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{where}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{where}:{n}: key '{key}' given twice")
        out[key] = value
    return out


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, enum.Enum):
            return type(default)(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(","))
        if key == "world.cluster_means":
            return np.array([[float(v) for v in row.split(",")] for row in raw.split(";")])
        return raw
    except ValueError:
        raise ConfigError(f"key '{key}': cannot read {raw!r} as {type(default).__name__}") from None


def _fill(cls, prefix: str, values: dict, used: set):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        if key not in values:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[f.name] = _coerce(key, values[key], default)
        used.add(key)
    return kwargs


def build_configs(values: dict, seed: int | None = None) -> tuple[SyntheticWorldConfig, TrainerConfig]:
    """Turn parsed key/value strings into (world, trainer) configs."""
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    used: set = set()
    nested = {}
    for name, cls in SECTIONS.items():
        try:
            nested[name] = cls(**_fill(cls, f"{name}.", values, used))
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"section '{name}': {e}") from None
    top = {f.name for f in dataclasses.fields(TrainerConfig)} - set(SECTIONS)
    trainer_kw = {k: v for k, v in _fill(TrainerConfig, "", values, used).items() if k in top}
    world_kw = _fill(SyntheticWorldConfig, "world.", values, used)
    unknown = sorted(set(values) - used)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    if seed is not None:
        trainer_kw["seed"] = seed
    try:
        world = SyntheticWorldConfig(**world_kw)
        trainer = TrainerConfig(**trainer_kw, **nested)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    return world, trainer


def load_config(path, seed: int | None = None) -> tuple[SyntheticWorldConfig, TrainerConfig]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    return build_configs(parse_flat(text, str(path)), seed)


def dump_flat(world: SyntheticWorldConfig, trainer: TrainerConfig) -> str:
    """Fully resolved config in the same flat format (round-trips through load)."""
    lines = []

    def fmt(v):
        if isinstance(v, enum.Enum):
            return v.value
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(repr(float(x)) for x in v)
        if isinstance(v, np.ndarray):
            return ";".join(",".join(repr(float(x)) for x in row) for row in v)
        if isinstance(v, float):
            return repr(v)
        return str(v)

    for f in dataclasses.fields(TrainerConfig):
        if f.name not in SECTIONS:
            lines.append(f"{f.name}={fmt(getattr(trainer, f.name))}")
    for name in SECTIONS:
        sub = getattr(trainer, name)
        for f in dataclasses.fields(sub):
            lines.append(f"{name}.{f.name}={fmt(getattr(sub, f.name))}")
    for f in dataclasses.fields(SyntheticWorldConfig):
        lines.append(f"world.{f.name}={fmt(getattr(world, f.name))}")
    return "\n".join(lines) + "\n"
