"""Little-endian binary reading with offset-bearing errors."""

from __future__ import annotations

import struct

import numpy as np

from .customer_data import DataError


class Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def fail(self, msg: str, at: int | None = None):
        raise DataError(f"{self.what}: {msg} at offset {self.pos if at is None else at}")

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            self.fail(f"truncated (need {n} bytes, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size * count), dtype=dtype).copy()

    def header(self, magic: bytes, version: int) -> None:
        got = self.buf[:4]
        if got != magic:
            self.fail(f"bad magic {got!r}, expected {magic!r}", at=0)
        self.pos = 4
        (v,) = self.unpack("<I")
        if v != version:
            self.fail(f"unsupported format version {v} (expected {version})", at=4)

    def finish(self) -> None:
        if self.pos != len(self.buf):
            self.fail(f"{len(self.buf) - self.pos} unexpected trailing bytes")
