"""Little-endian framed binary files with a CRC32 trailer.

Layout: ``magic (4 bytes) | version u16 | payload | crc32 u32``; the CRC
covers everything before it.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np


class FormatError(ValueError):
    """File is truncated, corrupt, or not of the expected kind."""


class VersionMismatchError(FormatError):
    """File is well formed but incompatible (format version or vocab)."""


class Writer:
    def __init__(self, magic: bytes, version: int):
        self.parts = [magic, struct.pack("<H", version)]

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", v))

    def raw(self, b: bytes):
        self.parts.append(b)

    def blob(self, b: bytes):
        self.u32(len(b))
        self.raw(b)

    def array(self, a):
        self.raw(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def getvalue(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.getvalue())


class Reader:
    def __init__(self, data: bytes, magic: bytes, version: int, what="file"):
        if len(data) < len(magic) + 6:
            raise FormatError(f"{what} is truncated")
        if data[: len(magic)] != magic:
            raise FormatError(f"not a {what} (bad magic bytes)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise FormatError(f"{what} is corrupt or truncated (checksum mismatch)")
        self.data = body
        self.pos = len(magic)
        (found,) = self._unpack("<H")
        if found != version:
            raise VersionMismatchError(f"{what} format version {found}, expected {version}")
        self.what = what

    @classmethod
    def open(cls, path, magic, version, what="file"):
        with open(path, "rb") as fh:
            return cls(fh.read(), magic, version, what)

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{getattr(self, 'what', 'file')} is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt):
        return struct.unpack(fmt, self._take(struct.calcsize(fmt)))

    def u8(self):
        return self._unpack("<B")[0]

    def u32(self):
        return self._unpack("<I")[0]

    def f64(self):
        return self._unpack("<d")[0]

    def raw(self, n):
        return self._take(n)

    def blob(self):
        return self._take(self.u32())

    def array(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self._take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what} has trailing bytes")
