"""Binary readers and writers shared by the checkpoint, grid and scene files.

All formats are little-endian. The voxel grid layout ("SVOX") is::

    b"SVOX" | u32 version | u32 dims[3] | f64 resolution | f64 origin[3]
    | u8 labels[x*y*z]   (x fastest, 255 = unlabeled)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Base class for malformed binary files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class Reader:
    def __init__(self, blob: bytes):
        self.blob = memoryview(blob)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(
                f"need {n} bytes at offset {self.pos}, file has {len(self.blob)}")
        out = bytes(self.blob[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def f64(self) -> float:
        return self.unpack("<d")[0]

    def f64_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def u8_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(n), dtype=np.uint8).copy()

    def at_end(self) -> bool:
        return self.pos >= len(self.blob)


SVOX_MAGIC = b"SVOX"
SVOX_VERSION = 1


def dumps_grid(labels: np.ndarray, resolution: float, origin) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError("label grid must be 3-D")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must fit in u8")
    head = SVOX_MAGIC + struct.pack("<I3I", SVOX_VERSION, *labels.shape)
    head += struct.pack("<d3d", float(resolution), *[float(o) for o in origin])
    return head + labels.astype(np.uint8).ravel(order="F").tobytes()


def read_grid_block(r: Reader):
    if r.take(4) != SVOX_MAGIC:
        raise BadMagicError("expected SVOX grid block")
    version = r.u32()
    if version != SVOX_VERSION:
        raise UnsupportedVersionError(f"SVOX version {version}")
    dims = r.unpack("<3I")
    resolution = r.f64()
    origin = r.unpack("<3d")
    labels = r.u8_array(int(np.prod(dims))).reshape(dims, order="F")
    return labels, resolution, origin


def loads_grid(blob: bytes):
    """Parse an SVOX blob into (labels uint8 [x,y,z], resolution, origin)."""
    return read_grid_block(Reader(blob))


def write_grid(path, labels, resolution, origin) -> None:
    Path(path).write_bytes(dumps_grid(labels, resolution, origin))


def read_grid(path):
    return loads_grid(Path(path).read_bytes())
