"""Little-endian binary reading/writing shared by the FSDS and FSCK formats."""

from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def _need(self, n: int, what: str) -> None:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated file: need {n} bytes for {what}, have {len(self.buf) - self.pos}",
                self.pos,
            )

    def raw(self, n: int, what: str = "bytes") -> bytes:
        self._need(n, what)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str = "u32") -> int:
        return struct.unpack("<I", self.raw(4, what))[0]

    def f32(self, what: str = "f32") -> float:
        return struct.unpack("<f", self.raw(4, what))[0]

    def f32_array(self, count: int, what: str = "f32 array") -> np.ndarray:
        data = self.raw(4 * count, what)
        return np.frombuffer(data, dtype="<f4").astype(np.float32)

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def u32(value: int) -> bytes:
    return struct.pack("<I", value)


def f32(value: float) -> bytes:
    return struct.pack("<f", value)


def f32_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()
