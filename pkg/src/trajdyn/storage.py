"""Self-describing binary container used for datasets and model checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"TRAJDYN\\0"
    hdr_len    uint64    length of the JSON header in bytes
    header     hdr_len   UTF-8 JSON: {"kind", "schema_version", "meta", "blocks"}
    payload    ...       blocks back to back, row-major, little-endian

Each entry of ``blocks`` is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with ``offset`` relative to the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TRAJDYN\0"
_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8"}


class FormatError(ValueError):
    pass


def write_container(path, kind: str, schema_version: int, meta: dict, blocks: dict) -> None:
    entries, payload, offset = [], [], 0
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        code = {"f": "f8" if arr.dtype.itemsize == 8 else "f4", "i": "i8", "u": "i8", "b": "i8"}[arr.dtype.kind]
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    header = json.dumps({"kind": kind, "schema_version": schema_version, "meta": meta,
                         "blocks": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not a trajdyn container")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def read_container(path, kind: str | None = None):
    """Return ``(header, blocks)``; checks ``kind`` when given."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a trajdyn container")
    (n,) = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start: start + n].decode("utf-8"))
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    base = start + n
    blocks = {}
    for e in header["blocks"]:
        lo = base + e["offset"]
        buf = raw[lo: lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise FormatError(f"{path}: truncated block {e['name']!r}")
        blocks[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header, blocks
