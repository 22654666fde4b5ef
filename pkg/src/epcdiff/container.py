"""EPCV container: named little-endian arrays in one file.

Layout::

    b"EPCV" | version u16 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | extents u64 * rank
               | dtype tag u8 | raw little-endian payload

Dtype tag 0 is float64. Tag 1 (uint8) carries UTF-8 JSON metadata such as
config echoes.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EPCV"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}
TAGS = {np.dtype("<f8"): 0, np.dtype("u1"): 1}


class ContainerError(ValueError):
    pass


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            arr = arr.astype("u1")
        else:
            arr = arr.astype("<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ContainerError(f"rank {arr.ndim} too large for entry {name!r}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<B", TAGS[arr.dtype]))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ContainerError("not an EPCV container (bad magic bytes)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported EPCV version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            (tag,) = struct.unpack_from("<B", data, pos)
            pos += 1
            if tag not in DTYPES:
                raise ContainerError(f"unknown dtype tag {tag} for entry {name!r}")
            dt = DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(data):
                raise ContainerError(f"truncated payload for entry {name!r}")
            out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise ContainerError(f"truncated EPCV header: {exc}") from None
    return out


def save(path, entries: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    items = dict(entries)
    if meta is not None:
        items["__meta__"] = np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(items))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (arrays, metadata) from an EPCV file."""
    entries = decode(Path(path).read_bytes())
    meta_raw = entries.pop("__meta__", None)
    meta = json.loads(meta_raw.tobytes().decode("utf-8")) if meta_raw is not None else {}
    return entries, meta
