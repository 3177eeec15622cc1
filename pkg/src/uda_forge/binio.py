"""Little-endian struct reader/writer with offset-aware errors."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_TAGS = {"f32": 0, "f64": 1}


def dtype_code(dtype: str | int) -> int:
    if isinstance(dtype, str):
        try:
            return DTYPE_TAGS[dtype]
        except KeyError:
            raise FormatError(f"unknown dtype {dtype!r}") from None
    if dtype not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {dtype}")
    return dtype


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def name(self, name: str) -> None:
        b = name.encode("utf-8")
        if len(b) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:32]}...")
        self.pack("H", len(b))
        self.raw(b)

    def array(self, a: np.ndarray, dtype: np.dtype) -> None:
        self.raw(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.offset = 0

    def _take(self, n: int, what: str) -> memoryview:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated input while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize("<" + fmt)
        values = struct.unpack("<" + fmt, self._take(size, what))
        return values[0] if len(values) == 1 else values

    def magic(self, expected: bytes) -> None:
        got = bytes(self._take(len(expected), "magic"))
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def name(self) -> str:
        n = self.unpack("H", "name length")
        start = self.offset
        try:
            return bytes(self._take(n, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start) from None

    def array(self, count: int, dtype: np.dtype, what: str) -> np.ndarray:
        buf = self._take(count * dtype.itemsize, what)
        return np.frombuffer(buf, dtype=dtype).copy()

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes", self.offset)
