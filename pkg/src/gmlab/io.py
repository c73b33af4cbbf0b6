"""Binary container shared by checkpoints and corpora.

Layout::

    b"GMLAB001"
    uint64 little-endian: manifest byte length
    manifest: UTF-8 JSON {"entries": [{"name", "shape", "offset"}...], "meta": {...}}
    payload: little-endian float64 arrays, concatenated in manifest order

``offset`` counts bytes from the start of the payload.  The JSON is written
with sorted keys and fixed separators so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from gmlab.errors import ContractViolation

MAGIC = b"GMLAB001"


class ContainerError(OSError):
    """File missing, unreadable, or not a valid container."""


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        b = a.tobytes()
        blobs.append(b)
        offset += len(b)
    manifest = _dumps({"entries": entries, "meta": meta or {}})
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(blobs)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise ContainerError("bad magic; not a GMLAB001 container")
    if len(buf) < 16:
        raise ContainerError("truncated header")
    (mlen,) = struct.unpack("<Q", buf[8:16])
    if len(buf) < 16 + mlen:
        raise ContainerError("truncated manifest")
    try:
        manifest = json.loads(buf[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable manifest: {exc}") from exc
    payload = memoryview(buf)[16 + mlen :]
    try:
        return _read_entries(manifest, payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"malformed manifest: {exc}") from exc


def _read_entries(manifest: dict, payload: memoryview) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for ent in manifest["entries"]:
        shape = tuple(int(d) for d in ent["shape"])
        if any(d < 0 for d in shape):
            raise ContainerError(f"entry {ent['name']}: negative dimension")
        n = int(np.prod(shape, dtype=np.int64))
        start = int(ent["offset"])
        if start != expected:
            raise ContainerError(f"entry {ent['name']}: offset {start} breaks manifest order")
        stop = start + 8 * n
        if stop > len(payload):
            raise ContainerError(f"entry {ent['name']}: payload too short")
        arrays[ent["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
        expected = stop
    if expected != len(payload):
        raise ContainerError("payload length disagrees with manifest shapes")
    return arrays, manifest.get("meta", {})


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    data = encode(arrays, meta)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise ContainerError(f"cannot write {path}: {exc}") from exc


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    return decode(buf)


def check_meta_kind(meta: dict, kind: str) -> None:
    if meta.get("kind") != kind:
        raise ContractViolation(f"expected a '{kind}' container, found '{meta.get('kind')}'")
