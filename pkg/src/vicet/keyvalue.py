"""Flat ``key = value`` text files used for scene and registration settings."""

from __future__ import annotations

import os


class ConfigError(ValueError):
    pass


def parse_keyvalue(text: str, repeatable=()) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys listed in ``repeatable`` collect a list of values, any other key
    may appear once.
    """
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in repeatable:
            out.setdefault(key, []).append(value)
        elif key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        else:
            out[key] = value
    return out


def read_keyvalue(path, repeatable=()) -> dict:
    with open(os.fspath(path)) as fh:
        return parse_keyvalue(fh.read(), repeatable)


def floats(value: str, n: int | None = None, name: str = "value") -> list[float]:
    """Split a comma/space separated list of floats, optionally checking its length."""
    try:
        vals = [float(v) for v in value.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{name}: non-numeric entry in {value!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{name}: expected {n} numbers, got {len(vals)}")
    return vals
