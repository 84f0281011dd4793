"""Bounds-checked little-endian reader shared by the binary file formats."""
import struct

from .errors import FormatError


class ByteReader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"file truncated while reading {what} "
                              f"(need {n} bytes, {len(self.buf) - self.pos} left)", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
