"""Little-endian helpers shared by the trace, checkpoint, state and cache formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import DimensionError, MagicError, TruncatedFileError

F64 = np.dtype("<f8")


class Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def magic(self, expected: bytes) -> None:
        if len(self.data) < len(expected):
            raise TruncatedFileError(f"{self.what}: file shorter than its magic")
        got = self.take(len(expected))
        if got != expected:
            raise MagicError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f64(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        arr = np.frombuffer(self.take(8 * n), dtype=F64).astype(np.float64)
        return arr.reshape(shape)

    def at_end(self) -> bool:
        return self.pos == len(self.data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise DimensionError(
                f"{self.what}: {len(self.data) - self.pos} trailing bytes after declared payload"
            )


def check_version(version: int, supported: int, what: str) -> None:
    if version != supported:
        raise MagicError(f"{what}: unsupported version {version} (expected {supported})")


def pack_u32(*vals: int) -> bytes:
    return struct.pack(f"<{len(vals)}I", *vals)


def pack_f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype=F64).tobytes()
