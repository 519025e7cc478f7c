"""Deterministic JSON text with fixed 17-significant-digit floats.

``json.dumps`` prints the shortest round-trip repr, which is fine for parsing
but not the fixed format reports are pinned to, so floats are formatted here.
"""
from __future__ import annotations

import json
import math
from typing import Any

import numpy as np

FLOAT_FORMAT = "%.17g"


def format_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    if x == 0.0:
        # collapse -0.0 so output does not depend on the sign of zero
        return "0"
    return FLOAT_FORMAT % x


def to_plain(obj: Any) -> Any:
    """Convert numpy containers and scalars into plain Python objects."""
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def _encode(obj: Any, indent: int | None, level: int) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if indent is None:
        sep, pad, pad_end = ", ", "", ""
    else:
        sep = ",\n" + " " * (indent * (level + 1))
        pad = "\n" + " " * (indent * (level + 1))
        pad_end = "\n" + " " * (indent * level)
    if isinstance(obj, list):
        if not obj:
            return "[]"
        # numeric rows stay on one line; they are matrices, not records
        if all(not isinstance(v, (list, dict)) for v in obj):
            return "[" + ", ".join(_encode(v, None, 0) for v in obj) + "]"
        return "[" + pad + sep.join(_encode(v, indent, level + 1) for v in obj) + pad_end + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = (json.dumps(str(k)) + ": " + _encode(v, indent, level + 1) for k, v in obj.items())
        return "{" + pad + sep.join(items) + pad_end + "}"
    raise TypeError(f"cannot serialize object of type {type(obj).__name__}")


def dumps(obj: Any, indent: int | None = 2) -> str:
    return _encode(to_plain(obj), indent, 0) + "\n"


def dump(obj: Any, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))


def load(path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
