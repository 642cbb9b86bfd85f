"""Flat ``key = value`` config files.

One key per line, ``#`` starts a comment, blank lines are ignored. Lists are
comma separated. Every TrainConfig and SynthConfig field is addressable, plus
the harness keys in ``HARNESS_KEYS``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing

from .synth import SynthConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.key = key
        self.line = line


HARNESS_KEYS = {
    "data": str,
    "test_data": str,
    "checkpoint": str,
    "psi_values": "float_list",
    "noise_rate": float,
    "noise_seed": int,
    "noise_mode": str,
    "test_fraction": float,
}


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        t = hints[f.name]
        if t is bool:
            out[f.name] = bool
        elif t is int:
            out[f.name] = int
        elif t is float:
            out[f.name] = float
        elif t is tuple:
            out[f.name] = "int_list"
        elif typing.get_origin(t) in (typing.Union, types.UnionType) and float in typing.get_args(t):
            out[f.name] = "optional_float"
        else:
            out[f.name] = str
    return out


KEY_TYPES = {**_field_types(SynthConfig), **_field_types(TrainConfig), **HARNESS_KEYS}


def _coerce(key, raw, line=None):
    kind = KEY_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown key {key!r}", key, line)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "optional_float":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "float_list":
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key!r}", key, line) from None
    return raw


class ConfigValues(dict):
    """Parsed values; ``lines`` maps each key to the line it was read from."""

    def __init__(self, *args, lines=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.lines = dict(lines or {})


def parse_config_text(text: str) -> ConfigValues:
    values = ConfigValues()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", None, lineno)
        key, raw = body.split("=", 1)
        key = key.strip()
        values[key] = _coerce(key, raw, lineno)
        values.lines[key] = lineno
    return values


def load_config(path) -> ConfigValues:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def apply_overrides(values: dict, overrides) -> ConfigValues:
    out = ConfigValues(values, lines=getattr(values, "lines", {}))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", None)
        key, raw = item.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), raw)
        out.lines.pop(key.strip(), None)
    return out


def _build(cls, values):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        key = next((k for k in sorted(kwargs, key=len, reverse=True) if k in msg), None)
        line = getattr(values, "lines", {}).get(key)
        if key is not None and key not in msg.split()[0:1]:
            msg = f"{key}: {msg}"
        raise ConfigError(msg, key, line) from None


def train_config(values: dict) -> TrainConfig:
    return _build(TrainConfig, values)


def synth_config(values: dict) -> SynthConfig:
    cfg = _build(SynthConfig, values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def format_config(values: dict) -> str:
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict) -> str:
    blob = json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in sorted(values.items())},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
