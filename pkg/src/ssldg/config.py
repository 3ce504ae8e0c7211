"""Flat ``key = value`` config files (``#`` starts a comment) mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key] = val
    return out


def load_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def _convert(tp, raw: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _convert(args[0], raw)
    if origin is tuple:
        return tuple(_convert(a, p.strip()) for a, p in zip(typing.get_args(tp), raw.split(",")))
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp in (int, float, str):
        return tp(raw)
    return raw


def apply_kv(obj, kv: dict[str, str], prefix: str = "", strict: bool = True):
    """Return a copy of dataclass ``obj`` with fields overridden from ``kv``.

    Keys are matched as ``prefix + field_name``; unknown keys raise when
    ``strict`` (only keys carrying the prefix are considered).
    """
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in kv.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            if strict:
                raise ValueError(f"unknown config key {key!r}")
            continue
        updates[name] = _convert(hints[name], raw)
    return dataclasses.replace(obj, **updates)


def dump_kv(obj, prefix: str = "") -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{prefix}{f.name} = {v}")
    return "\n".join(lines) + "\n"
