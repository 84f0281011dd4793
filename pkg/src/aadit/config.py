"""Flat ``key=value`` text serialization for (nested) config dataclasses.

Nested dataclass fields are flattened with dotted keys (``attention.left=5``).
Floats are written with ``repr`` so a round trip is exact; tuples are
comma-separated; ``#`` starts a comment.  Output is sorted by key so the same
config always produces the same bytes.
"""
from __future__ import annotations

import dataclasses
import types
import typing

from .errors import ConfigError


def _is_dc(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if value is None:
        return ""
    return str(value)


def flatten(obj, prefix: str = "") -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = _format(value)
    return out


def to_text(obj) -> str:
    flat = flatten(obj)
    return "".join(f"{k}={flat[k]}\n" for k in sorted(flat))


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def parse_value(tp, raw: str, key: str = "?"):
    tp, optional = _unwrap_optional(tp)
    if optional and raw == "":
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            (elem, *_rest) = typing.get_args(tp)
            if raw == "":
                return ()
            return tuple(parse_value(elem, part.strip(), key) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def from_pairs(cls, pairs: dict[str, str], prefix: str = "", strict: bool = True):
    """Build ``cls`` from flattened pairs; missing keys keep their defaults."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        tp = hints[f.name]
        if _is_dc(tp):
            kwargs[f.name] = from_pairs(tp, pairs, key + ".", strict=False)
        elif key in pairs:
            kwargs[f.name] = parse_value(tp, pairs[key], key)
    if strict:
        known = set(flatten(cls(**kwargs)))
        unknown = sorted(k for k in pairs if k.startswith(prefix) and k not in known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def from_text(cls, text: str):
    return from_pairs(cls, parse_pairs(text))
