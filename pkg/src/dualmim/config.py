"""Line-based ``key = value`` configuration over nested dataclasses.

Keys are dotted paths into the dataclass tree (``loss.alpha``, ``rgb_encoder.depth``).
``#`` starts a comment. Unknown or repeated keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError


def parse_config_text(text: str) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in items:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        items[key] = value
    return items


def _hints(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _parse_scalar(tp, text: str, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(_parse_scalar(inner, p, key) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.extend(flatten(v, key + "."))
        else:
            out.append((key, v))
    return out


def apply_items(obj, items: dict[str, str], prefix: str = ""):
    """Return a copy of ``obj`` with every dotted key parsed into its field.

    Each nested section is rebuilt once with all of its changes, so validation
    sees the final combination rather than intermediate states.
    """
    hints = _hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    groups: dict[str, dict] = {}
    for key, text in items.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        groups.setdefault(head, {})[rest or None] = text
    changes = {}
    for head, sub in groups.items():
        current = getattr(obj, head)
        full = prefix + head
        if dataclasses.is_dataclass(current):
            if None in sub:
                raise ConfigError(f"{full!r} is a section, not a value")
            changes[head] = apply_items(current, sub, full + ".")
        else:
            extra = [k for k in sub if k is not None]
            if extra:
                raise ConfigError(f"unknown config key {full + '.' + extra[0]!r}")
            changes[head] = _parse_scalar(hints[head], sub[None], full)
    try:
        return dataclasses.replace(obj, **changes)
    except ConfigError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def to_text(obj, prefix: str = "") -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flatten(obj, prefix))


def load_config(path, default):
    return apply_items(default, parse_config_text(Path(path).read_text(encoding="utf-8")))
