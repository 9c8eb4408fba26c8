"""Canonical JSON encoding: the single wire format for models, datasets and protocol payloads.

Numbers are IEEE-754 doubles rendered at full round-trip precision (Python's
``repr`` shortest form), keys are sorted, separators are minimal. Two equal
in-memory values therefore always serialize to byte-identical payloads.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

from .errors import DecodeError


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dump_bytes(obj: Any) -> bytes:
    return dumps(obj).encode("utf-8")


def loads(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"payload is not valid UTF-8: {exc}") from exc
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"payload is not valid JSON: {exc}") from exc


def sha256(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def content_hash64(obj: Any) -> str:
    """64-bit content hash of a JSON-serializable value, as 16 hex chars."""
    return hashlib.blake2b(dump_bytes(obj), digest_size=8).hexdigest()
