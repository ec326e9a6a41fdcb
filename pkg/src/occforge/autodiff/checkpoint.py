"""Binary parameter checkpoints.

Layout (little-endian): b"OCFG", u32 version, then until EOF one record per
parameter: u32 path length, UTF-8 path, u32 rank, u64 extents, float64 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..formats import BadMagicError, Reader, UnsupportedVersionError
from .params import ParameterStore

MAGIC = b"OCFG"
VERSION = 1


def dumps_checkpoint(store: ParameterStore) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for path, t in store.items():
        name = path.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_checkpoint(blob: bytes, seed: int = 0) -> ParameterStore:
    r = Reader(blob)
    if r.take(4) != MAGIC:
        raise BadMagicError("not an OCFG checkpoint")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}")
    store = ParameterStore(seed)
    while not r.at_end():
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = r.unpack(f"<{rank}Q") if rank else ()
        data = r.f64_array(int(np.prod(shape)) if rank else 1).reshape(shape)
        store.add(name, data)
    return store


def save_checkpoint(store: ParameterStore, path) -> None:
    Path(path).write_bytes(dumps_checkpoint(store))


def load_checkpoint(path, seed: int = 0) -> ParameterStore:
    return loads_checkpoint(Path(path).read_bytes(), seed)
