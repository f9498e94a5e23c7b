"""Flat ``key = value`` config files with ``#`` comments."""
from __future__ import annotations

import dataclasses
import os
from pathlib import Path

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
            key = key.strip()
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def write_kv(path, values: dict, header: str | None = None) -> None:
    """Atomically write ``values`` as ``key = value`` lines in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {header}\n"] if header else []
    lines += [f"{k} = {format_value(v)}\n" for k, v in values.items()]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    os.replace(tmp, path)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def coerce(key: str, text: str, like):
    """Parse ``text`` into the type of the default value ``like``."""
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None
    return text


def update_dataclass(obj, values: dict, consumed: set):
    """Return ``obj`` with every field named in ``values`` replaced."""
    changes = {}
    for f in dataclasses.fields(obj):
        if f.name in values:
            changes[f.name] = coerce(f.name, values[f.name], getattr(obj, f.name))
            consumed.add(f.name)
    return dataclasses.replace(obj, **changes)
