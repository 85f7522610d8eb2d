"""Canonical JSON serialization for datasets and checkpoints.

The stock ``json`` encoder renders floats with ``repr``; the file formats
here pin reals to 17 significant digits instead, which is exactly enough
to round-trip any binary64 value. The writer is also byte-deterministic:
dict keys are emitted in insertion order and there is no whitespace, so
identical in-memory documents always produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import ValidationError


def format_float17(value: float) -> str:
    """Render a finite float with 17 significant digits.

    A trailing ``.0`` is appended to integral renderings so the value parses
    back as a float (and ``-0.0`` keeps its sign through a round trip).
    """
    if not math.isfinite(value):
        raise ValidationError(f"cannot serialize non-finite value {value!r}")
    text = format(value, ".17g")
    if "e" not in text and "." not in text:
        text += ".0"
    return text


def dumps(obj: Any) -> str:
    """Serialize ``obj`` to canonical JSON text."""
    parts: list[str] = []
    _write(obj, parts.append)
    return "".join(parts)


def _write(obj: Any, emit: Callable[[str], None]) -> None:
    if obj is None:
        emit("null")
    elif obj is True:
        emit("true")
    elif obj is False:
        emit("false")
    elif isinstance(obj, (int, np.integer)):
        emit(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        emit(format_float17(float(obj)))
    elif isinstance(obj, str):
        emit(json.dumps(obj))
    elif isinstance(obj, dict):
        emit("{")
        first = True
        for key, value in obj.items():
            if not isinstance(key, str):
                raise ValidationError(f"JSON object keys must be strings, got {key!r}")
            if not first:
                emit(",")
            emit(json.dumps(key))
            emit(":")
            _write(value, emit)
            first = False
        emit("}")
    elif isinstance(obj, (list, tuple)):
        emit("[")
        for i, value in enumerate(obj):
            if i:
                emit(",")
            _write(value, emit)
        emit("]")
    elif isinstance(obj, np.ndarray):
        _write(obj.tolist(), emit)
    else:
        raise ValidationError(f"cannot serialize object of type {type(obj).__name__}")


def write_text_atomic(path: Path | str, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file and rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def dump_path(obj: Any, path: Path | str) -> None:
    write_text_atomic(path, dumps(obj))


def load_path(path: Path | str) -> Any:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path | str) -> str:
    return sha256_bytes(Path(path).read_bytes())
