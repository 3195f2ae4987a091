"""Little-endian binary envelope shared by the index and bundle files.

Layout common to both formats::

    magic        8 bytes (format id)
    version      u32
    ...          format-specific body
    crc32        u32 over everything before it

Strings are u32 length + UTF-8 bytes; arrays are raw little-endian
float32/int32 payloads. Readers verify the trailing CRC32 before parsing,
so truncation and corruption both surface as a checksum error; a wrong
magic or unsupported version surfaces as a format error.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatchError, FormatVersionMismatchError

INDEX_MAGIC = b"IMINDEX1"
BUNDLE_MAGIC = b"EMBUNDL1"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


class ByteWriter:
    """Accumulates a file body and appends the CRC32 trailer on save."""

    def __init__(self, magic: bytes, version: int = FORMAT_VERSION):
        if len(magic) != 8:
            raise ValueError("magic must be exactly 8 bytes")
        self._chunks: list[bytes] = [magic]
        self.write_u32(version)

    def write_bytes(self, b: bytes) -> None:
        self._chunks.append(b)

    def write_u32(self, v: int) -> None:
        self._chunks.append(_U32.pack(v))

    def write_u64(self, v: int) -> None:
        self._chunks.append(_U64.pack(v))

    def write_f64(self, v: float) -> None:
        self._chunks.append(_F64.pack(v))

    def write_str(self, s: str) -> None:
        b = s.encode("utf-8")
        self.write_u32(len(b))
        self._chunks.append(b)

    def write_f32_array(self, a: np.ndarray) -> None:
        arr = np.ascontiguousarray(a, dtype="<f4")
        self._chunks.append(arr.tobytes())

    def write_i32_array(self, a: np.ndarray) -> None:
        arr = np.ascontiguousarray(a, dtype="<i4")
        self._chunks.append(arr.tobytes())

    def body_size(self) -> int:
        return sum(len(c) for c in self._chunks)

    def save(self, path: str | Path) -> None:
        body = b"".join(self._chunks)
        crc = zlib.crc32(body) & 0xFFFFFFFF
        Path(path).write_bytes(body + _U32.pack(crc))


class ByteReader:
    """Verifies the CRC32 trailer, then parses the body sequentially."""

    def __init__(self, path: str | Path, magic: bytes):
        raw = Path(path).read_bytes()
        if len(raw) < len(magic) + 8:
            raise ChecksumMismatchError(f"{path}: file too short to be valid")
        if raw[: len(magic)] != magic:
            raise FormatVersionMismatchError(
                f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}"
            )
        body, trailer = raw[:-4], raw[-4:]
        crc = zlib.crc32(body) & 0xFFFFFFFF
        (stored,) = _U32.unpack(trailer)
        if crc != stored:
            raise ChecksumMismatchError(
                f"{path}: CRC32 mismatch (stored {stored:#x}, computed {crc:#x})"
            )
        self._body = body
        self._pos = len(magic)
        version = self.read_u32()
        if version != FORMAT_VERSION:
            raise FormatVersionMismatchError(
                f"{path}: unsupported format version {version}"
            )

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._body):
            raise ChecksumMismatchError("unexpected end of file body")
        b = self._body[self._pos : self._pos + n]
        self._pos += n
        return b

    def read_u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def read_u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def read_f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def read_str(self) -> str:
        n = self.read_u32()
        return self._take(n).decode("utf-8")

    def read_f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(count * 4), dtype="<f4").copy()

    def read_i32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(count * 4), dtype="<i4").copy()

    def tell(self) -> int:
        return self._pos

    def done(self) -> bool:
        return self._pos == len(self._body)
