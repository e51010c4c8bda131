"""Flat ``key=value`` text configs.

One line per field, ``#`` comments, optional dotted section prefixes
(``model.dim=64``).  Tuples are written comma-separated.
"""

from __future__ import annotations

import dataclasses
import types
import typing


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_value(text: str, hint):
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        parts = [p for p in text.split(",") if p.strip()]
        if args and args[-1] is Ellipsis:
            return tuple(_parse_scalar(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} values, got {text!r}")
        return tuple(_parse_scalar(p, a) for p, a in zip(parts, args))
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.strip().lower() in ("", "none"):
            return None
        return parse_value(text, args[0])
    return _parse_scalar(text, hint)


def read_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dump_kv(obj, prefix: str = "") -> str:
    lines = []
    for f in dataclasses.fields(obj):
        lines.append(f"{prefix}{f.name}={_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def from_kv(cls, values: dict[str, str], prefix: str = "", base=None):
    """Build dataclass ``cls`` from string values, starting from ``base``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw in values.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        if key not in names:
            if prefix:
                raise KeyError(f"unknown config key {prefix}{key}")
            continue
        updates[key] = parse_value(raw, hints[key])
    if base is None:
        return cls(**updates)
    return dataclasses.replace(base, **updates)
