"""Flat ``key = value`` run configuration files.

Values are parsed as JSON when possible (numbers, booleans, lists), otherwise
kept as strings, then coerced to the target dataclass field types.
"""

from __future__ import annotations

import configparser
import json
import typing
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError

_SECTION = "config"


def read_flat(path) -> dict:
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for key, raw in parser[_SECTION].items():
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw.strip()
    return out


def write_flat(values: dict, path) -> None:
    lines = [f"{k} = {json.dumps(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def build(cls, values: dict, strict: bool = True):
    """Instantiate dataclass ``cls`` from ``values``; unknown keys are an error
    when ``strict``."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if strict and unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if k not in known:
            continue
        hint = hints[k]
        origin = typing.get_origin(hint)
        if origin is tuple and isinstance(v, list):
            v = tuple(v)
        elif hint is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def load(cls, path, strict: bool = True):
    return build(cls, read_flat(path), strict)
