"""The ``FSPK1`` checkpoint container.

Layout (all integers little-endian)::

    b"FSPK1"
    u32 record_count
    record_count x (u32 name_len, name utf-8, u32 ndim, ndim x u32, float32 data)
    u32 trailer_len, trailer JSON (utf-8)

The JSON trailer carries optimizer scalars, the config hash and any other
metadata; float arrays go in records so the round trip is bit-exact.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from ..errors import BadMagicError, TruncatedPayloadError

MAGIC = b"FSPK1"


def dumps(records, meta=None):
    parts = [MAGIC, struct.pack("<I", len(records))]
    for name in sorted(records):
        arr = np.asarray(records[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    trailer = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(trailer)))
    parts.append(trailer)
    return b"".join(parts)


def loads(blob):
    if blob[:5] != MAGIC:
        raise BadMagicError("not an FSPK1 checkpoint")
    pos = 5

    def read(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedPayloadError("checkpoint ends mid-record")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", read(4))
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4))
        name = read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        records[name] = np.frombuffer(read(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    (tlen,) = struct.unpack("<I", read(4))
    meta = json.loads(read(tlen).decode("utf-8"))
    return records, meta


def save(path, records, meta=None):
    blob = dumps(records, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def save_module(path, module, meta=None, optimizer=None):
    records = dict(module.state_dict())
    meta = dict(meta or {})
    if optimizer is not None:
        records.update(optimizer.state_records())
        meta["optimizer"] = optimizer.state.to_json()
    save(path, records, meta)


def load_module(path, module, optimizer=None):
    records, meta = load(path)
    module.load_state_dict({k: v for k, v in records.items() if not k.startswith("__")})
    if optimizer is not None and "optimizer" in meta:
        optimizer.load_state_records(records, meta["optimizer"])
    return meta
