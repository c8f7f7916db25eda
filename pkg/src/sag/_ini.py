"""Flat key-value sections <-> frozen dataclasses.

Values are written with ``repr`` for floats so a round trip is exact.
Tuples are comma-separated; the element type follows the default value.
"""

from __future__ import annotations

from dataclasses import fields, is_dataclass, replace


def _convert(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if default:
            conv = type(default[0])
        elif all(v.lstrip("-").isdigit() for v in items):
            conv = int
        else:
            conv = float
        return tuple(conv(v) for v in items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def from_section(base, section, where: str = ""):
    """Return ``base`` with the keys of ``section`` applied; unknown keys are an error."""
    names = {f.name for f in fields(base)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {unknown}")
    updates = {}
    for key, raw in section.items():
        try:
            updates[key] = _convert(raw, getattr(base, key))
        except ValueError as exc:
            raise ValueError(f"[{where}] {key}: {exc}") from None
    return replace(base, **updates)


def to_section(obj) -> dict:
    assert is_dataclass(obj)
    return {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
