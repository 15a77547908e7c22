"""Flat ``key = value`` config files and grid files.

A config file has one pair per line; ``#`` starts a comment. Keys are the
``ModelConfig`` fields plus a few command options (``model``,
``gibbs_iters``). Unknown keys are errors. A grid file uses the same syntax
with ``|`` separating alternative values; its cells are the Cartesian
product in file order.
"""

from __future__ import annotations

import itertools
from dataclasses import fields
from pathlib import Path

from .engine import ModelConfig
from .errors import DataError, TensorFormatError

__all__ = ["COMMAND_KEYS", "parse_value", "parse_config", "parse_grid",
           "load_config", "load_grid", "split_options"]

COMMAND_KEYS = {"model": str, "gibbs_iters": int}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types():
    defaults = ModelConfig()
    types = {f.name: type(getattr(defaults, f.name)) for f in fields(ModelConfig)}
    types.update(COMMAND_KEYS)
    return types


def parse_value(key, raw):
    """Convert the text ``raw`` to the type expected for ``key``."""
    types = _field_types()
    if key not in types:
        raise DataError(f"unknown config key {key!r}")
    kind = types[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(tok) for tok in raw.replace(" ", "").split(",") if tok)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise DataError(f"bad value for {key}: {raw!r}") from None


def _pairs(text):
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TensorFormatError("expected key = value", line_no)
        key, value = line.split("=", 1)
        yield line_no, key.strip(), value


def parse_config(text):
    """Dict of typed overrides from config text."""
    out = {}
    for line_no, key, value in _pairs(text):
        if key in out:
            raise TensorFormatError(f"duplicate key {key!r}", line_no)
        try:
            out[key] = parse_value(key, value)
        except DataError as exc:
            raise TensorFormatError(str(exc), line_no) from None
    return out


def parse_grid(text):
    """List of override dicts, one per grid cell."""
    axes = []
    seen = set()
    for line_no, key, value in _pairs(text):
        if key in seen:
            raise TensorFormatError(f"duplicate key {key!r}", line_no)
        seen.add(key)
        try:
            axes.append([(key, parse_value(key, v)) for v in value.split("|")])
        except DataError as exc:
            raise TensorFormatError(str(exc), line_no) from None
    if not axes:
        raise DataError("empty grid")
    return [dict(cell) for cell in itertools.product(*axes)]


def _read(path):
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_config(path):
    return parse_config(_read(path))


def load_grid(path):
    return parse_grid(_read(path))


def split_options(overrides):
    """Separate ``(model_config_overrides, command_options)``."""
    model = {k: v for k, v in overrides.items() if k not in COMMAND_KEYS}
    command = {k: v for k, v in overrides.items() if k in COMMAND_KEYS}
    return model, command
