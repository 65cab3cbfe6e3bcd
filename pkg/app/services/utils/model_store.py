# app/services/utils/model_store.py
"""Versioned JSON container for trained parameter blocks.

Layout: ``{"format": FORMAT, "version": VERSION, ...payload}`` written with
sorted keys. Every ``numpy`` array anywhere in the payload is stored as
``{"__array__": {"dtype": "<f8"|"<i8", "shape": [...], "data": <base64>}}``
so identical inputs give byte-identical files on every platform.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any, Dict

import numpy as np

from app.core.errors import ModelError

FORMAT = "joint-ie-bundle"
VERSION = 1
_ARRAY = "__array__"


def encode_array(arr: np.ndarray) -> Dict[str, Any]:
    arr = np.asarray(arr)
    if arr.dtype.kind in "iub":
        dtype = "<i8"
    elif arr.dtype.kind == "f":
        dtype = "<f8"
    else:
        raise ModelError(f"cannot store arrays of dtype {arr.dtype}")
    data = np.ascontiguousarray(arr.astype(dtype)).tobytes()
    return {_ARRAY: {"dtype": dtype, "shape": list(arr.shape), "data": base64.b64encode(data).decode("ascii")}}


def decode_array(raw: Dict[str, Any]) -> np.ndarray:
    meta = raw[_ARRAY]
    if meta["dtype"] not in ("<f8", "<i8"):
        raise ModelError(f"unsupported array dtype {meta['dtype']!r}")
    flat = np.frombuffer(base64.b64decode(meta["data"]), dtype=meta["dtype"])
    native = np.float64 if meta["dtype"] == "<f8" else np.int64
    return flat.astype(native).reshape(meta["shape"])


def _encode(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return encode_array(value)
    if isinstance(value, dict):
        return {str(k): _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _decode(value: Any) -> Any:
    if isinstance(value, dict):
        if _ARRAY in value:
            return decode_array(value)
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


def dumps_container(payload: Dict[str, Any]) -> str:
    body = {"format": FORMAT, "version": VERSION, **_encode(payload)}
    return json.dumps(body, sort_keys=True, separators=(",", ":")) + "\n"


def loads_container(text: str) -> Dict[str, Any]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"bundle is not valid JSON: {e.msg}") from e
    if not isinstance(raw, dict) or raw.get("format") != FORMAT:
        raise ModelError("not a joint-ie bundle")
    if raw.get("version") != VERSION:
        raise ModelError(f"bundle version {raw.get('version')} is not supported (expected {VERSION})")
    raw.pop("format")
    raw.pop("version")
    return _decode(raw)


def write_container(payload: Dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(dumps_container(payload), encoding="utf-8", newline="\n")


def read_container(path: str | Path) -> Dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ModelError(f"cannot read bundle {path}: {e}") from e
    return loads_container(text)
