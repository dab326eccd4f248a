"""Dataclass <-> JSON plumbing with key-path error reporting."""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Any, TypeVar

from .errors import ConfigError

T = TypeVar("T")


def from_dict(cls: type[T], data: Any, key_path: str = "") -> T:
    """Build a (frozen) config dataclass from a mapping whose keys match its fields.

    Unknown keys and type mismatches raise ConfigError carrying the key path.
    Validation errors from the dataclass's own __post_init__ are re-raised the
    same way.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}", key_path or "<root>")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", _join(key_path, unknown[0]))
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(fields[name], value, _join(key_path, name))
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if not key_path:
            raise
        raise ConfigError(exc.detail, _join(key_path, exc.key_path) if exc.key_path else key_path) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key_path or cls.__name__) from exc


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def _coerce(field: dataclasses.Field, value: Any, key_path: str) -> Any:
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    kind = kind.replace(" ", "")
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected boolean, got {value!r}", key_path)
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(f"expected integer, got {value!r}", key_path)
        return int(value)
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected number, got {value!r}", key_path)
        if not math.isfinite(value):
            raise ConfigError("must be finite", key_path)
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected string, got {value!r}", key_path)
        return value
    if kind.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected list, got {value!r}", key_path)
        out = []
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"expected number, got {v!r}", f"{key_path}[{i}]")
            out.append(float(v))
        return tuple(out)
    return value


def to_dict(obj: Any) -> dict:
    out = dataclasses.asdict(obj)
    for k, v in out.items():
        if isinstance(v, tuple):
            out[k] = list(v)
    return out


def read_json(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from exc
