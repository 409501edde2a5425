"""Binary container shared by dataset, checkpoint and concept-label files.

Layout (all integers little-endian)::

    magic       4 bytes, e.g. b"MCDS"
    version     uint32
    header_len  uint64
    header      UTF-8 JSON, ``header_len`` bytes
    payload     raw bytes, offsets described by the header

The JSON header is dumped with sorted keys and fixed separators so that
writing the same content twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError

_PREFIX = struct.Struct("<4sIQ")


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_container(path: str | os.PathLike, magic: bytes, version: int, header: dict, payload: bytes) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    head = dump_json(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(magic, version, len(head)))
        f.write(head)
        f.write(payload)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike, magic: bytes, versions: tuple[int, ...] = (1,)) -> tuple[int, dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: truncated header")
    got, version, n = _PREFIX.unpack_from(data)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version not in versions:
        raise FormatError(f"{path}: unsupported version {version}")
    start = _PREFIX.size
    if start + n > len(data):
        raise FormatError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable JSON header ({exc})") from None
    return version, header, data[start + n:]


def pack_arrays(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    """Lay out named arrays back to back; returns a table and the payload."""
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def unpack_arrays(table: list[dict], payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    for entry in table:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise FormatError(f"array {entry['name']!r} runs past end of payload")
        arr = np.frombuffer(payload[lo:lo + n], dtype=np.dtype(entry["dtype"]))
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def fingerprint(obj: Any) -> str:
    return hashlib.sha256(dump_json(obj).encode("utf-8")).hexdigest()
