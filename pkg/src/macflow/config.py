"""Flat ``key = value`` configuration files for :class:`~macflow.trainer.TrainConfig`.

Blank lines and ``#`` comments are ignored. Numbers may be written as
fractions (``1/8``). Lists are comma separated; matrices (mixture means) use
``;`` between rows, e.g. ``target_means = -4, 0; 4, 0``.
"""

import typing
from dataclasses import fields
from fractions import Fraction
from pathlib import Path

from .exceptions import ConfigError
from .trainer import TrainConfig

ALIASES = {"strategy": "coupling", "lambda": "lam", "B": "batch_size"}
_FIELDS = {f.name: f for f in fields(TrainConfig)}
_HINTS = typing.get_type_hints(TrainConfig)
_MATRICES = {"source_means", "target_means"}


def _number(text):
    return float(Fraction(text.strip()))


def _parse_value(key, raw):
    kind = _HINTS[key]
    try:
        if key in _MATRICES:
            return tuple(
                tuple(_number(x) for x in row.replace(",", " ").split())
                for row in raw.split(";") if row.strip()
            )
        if kind is tuple:
            return tuple(_number(x) for x in raw.split(",") if x.strip())
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            value = Fraction(raw.strip())
            if value.denominator != 1:
                raise ValueError(f"not an integer: {raw!r}")
            return int(value)
        if kind is float:
            return _number(raw)
        return raw.strip()
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(key, f"cannot parse {raw.strip()!r}: {exc}") from None


def parse_config(text, overrides=None):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
        if key in values:
            raise ConfigError(key, "given more than once")
        values[key] = _parse_value(key, raw)
    for key, value in (overrides or {}).items():
        key = ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _parse_value(key, value) if isinstance(value, str) else value
    return TrainConfig(**values)


def load_config(path, overrides=None):
    return parse_config(Path(path).read_text(), overrides)


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(", ".join(repr(float(x)) for x in row) for row in value)
        return ", ".join(repr(float(x)) for x in value)
    return repr(value) if isinstance(value, float) else str(value)


def format_config(config):
    """Every field, one per line; ``parse_config`` reads it back to an equal config."""
    return "".join(f"{f.name} = {_render(getattr(config, f.name))}\n" for f in fields(config))
