"""Flat ``key = value`` config files with ``#`` comments."""

import dataclasses

from .errors import ConfigError, ParseError


def read_key_values(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            if not sep or not key.strip():
                raise ParseError(path, lineno, "expected key = value")
            values[key.strip()] = (raw.strip(), lineno)
    return values


def coerce(kind, raw, path="<config>", lineno=0):
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ParseError(path, lineno, f"bad value {raw!r}") from None


def load_dataclass(cls, path, allowed=None, **overrides):
    """Build ``cls`` from a key=value file; ``overrides`` that are not None win."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    allowed = set(fields) if allowed is None else set(allowed)
    values = {}
    if path is not None:
        for key, (raw, lineno) in read_key_values(path).items():
            if key not in allowed:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = coerce(fields[key].type, raw, path, lineno)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)
