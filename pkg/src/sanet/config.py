"""Plain-text ``key = value`` configuration files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigurationError

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_pairs(text, source="<config>"):
    """Return an ordered dict of raw string values; ``#`` starts a comment."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: missing key")
        if key in pairs:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def coerce(value, default, key="value"):
    """Convert the string ``value`` to the type of ``default``."""
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


def field_defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def build(cls, values=None, overrides=None, source="<config>"):
    """Instantiate ``cls`` from raw string ``values`` then typed ``overrides``.

    Unknown keys in either mapping are configuration errors.
    """
    defaults = field_defaults(cls)
    kwargs = {}
    for key, value in (values or {}).items():
        if key not in defaults:
            raise ConfigurationError(f"{source}: unknown key {key!r}")
        kwargs[key] = coerce(value, defaults[key], key)
    for key, value in (overrides or {}).items():
        if key not in defaults:
            raise ConfigurationError(f"unknown option {key!r}")
        if value is not None:
            kwargs[key] = value
    return cls(**kwargs)


def load(cls, path=None, overrides=None):
    if path is None:
        return build(cls, None, overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {p}: {exc.strerror}") from None
    return build(cls, parse_pairs(text, str(p)), overrides, str(p))


def dump(obj):
    """Render a dataclass instance back to ``key = value`` lines."""
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
