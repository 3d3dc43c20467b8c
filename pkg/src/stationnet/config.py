"""Flat ``key = value`` config files shared by the scenario, training and baseline settings.

One file may mix keys of every config class; each class picks up the keys
it knows. ``#`` starts a comment. Tuples are comma separated, nested tuples
(the weather transition matrix) use ``;`` between rows, dates are ISO
strings and lists of dates are comma separated.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from pathlib import Path
from typing import Dict, Iterable

_NONE = ("", "none", "null")


def parse_key_values(text: str) -> Dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in out:
            raise ValueError(f"config line {n}: duplicate key {k!r}")
        out[k] = v.strip()
    return out


def read_config(path) -> Dict[str, str]:
    return parse_key_values(Path(path).read_text(encoding="utf-8"))


def _parse_value(name: str, default, raw: str):
    raw = raw.strip()
    if name == "snapshot_dates":
        return None if raw.lower() in _NONE else [dt.date.fromisoformat(x.strip()) for x in raw.split(",")]
    if name == "clip_norm":
        return None if raw.lower() in _NONE else float(raw)
    if isinstance(default, bool):
        if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, dt.date):
        return dt.date.fromisoformat(raw)
    if isinstance(default, tuple) and default and isinstance(default[0], tuple):
        return tuple(tuple(float(x) for x in row.split(",")) for row in raw.split(";"))
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(","))
    return raw


def from_mapping(cls, values: Dict[str, str], strict: bool = False, **overrides):
    """Build config dataclass ``cls`` from string values.

    Unknown keys are ignored unless ``strict``. Keyword ``overrides`` are
    already-typed values applied last.
    """
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in names:
            if strict:
                raise ValueError(f"unknown config key {k!r}")
            continue
        try:
            kwargs[k] = _parse_value(k, getattr(defaults, k), v)
        except ValueError as exc:
            raise ValueError(f"config key {k!r}: {exc}") from None
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def check_known(values: Dict[str, str], classes: Iterable[type]) -> None:
    known = set()
    for cls in classes:
        known |= {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
