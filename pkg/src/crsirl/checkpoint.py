"""Checkpoint files: named float sections behind a JSON header.

Binary layout: one line of UTF-8 JSON (the header), a newline, then every
section's values as little-endian float32, concatenated in header order.
The all-JSON variant stores the header keys plus ``"data": {name: [...]}``
and keeps full float64 precision. ``read_sections`` accepts either.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from crsirl.errors import InvalidArgument

FORMAT = "crsirl-sections/1"


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_sections(
    path: str | os.PathLike,
    sections: dict[str, np.ndarray],
    meta: dict[str, Any] | None = None,
    as_json: bool = False,
) -> None:
    header = {
        "format": FORMAT,
        **(meta or {}),
        "sections": [{"name": k, "shape": list(np.shape(v))} for k, v in sections.items()],
    }
    if as_json:
        header["data"] = {k: np.asarray(v, dtype=np.float64).ravel().tolist() for k, v in sections.items()}
        atomic_write_text(path, json.dumps(header, indent=1) + "\n")
        return
    blob = b"".join(np.asarray(v, dtype="<f4").ravel().tobytes() for v in sections.values())
    atomic_write_bytes(path, json.dumps(header).encode("utf-8") + b"\n" + blob)


def read_sections(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError):
        doc = None
    if isinstance(doc, dict) and "data" in doc:
        header = doc
        data = header.pop("data")
        out = {}
        for sec in header["sections"]:
            out[sec["name"]] = np.asarray(data[sec["name"]], dtype=np.float64).reshape(sec["shape"])
        return header, out

    nl = raw.find(b"\n")
    if nl < 0:
        raise InvalidArgument(f"{path}: missing checkpoint header")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise InvalidArgument(f"{path}: unknown checkpoint format {header.get('format')!r}")
    values = np.frombuffer(raw[nl + 1:], dtype="<f4")
    out, pos = {}, 0
    for sec in header["sections"]:
        n = int(np.prod(sec["shape"], dtype=np.int64))
        if pos + n > values.size:
            raise InvalidArgument(f"{path}: truncated section {sec['name']!r}")
        out[sec["name"]] = values[pos:pos + n].astype(np.float64).reshape(sec["shape"])
        pos += n
    if pos != values.size:
        raise InvalidArgument(f"{path}: {values.size - pos} trailing values")
    return header, out
