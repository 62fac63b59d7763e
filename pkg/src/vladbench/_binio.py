"""Little-endian primitives shared by the binary file formats.

Every on-disk format in this package is a 4-byte magic tag, a u16 version,
fixed-width metadata, u32-length-prefixed UTF-8 strings, then a flat numeric
payload.  ``ByteReader`` decodes that family with the error taxonomy from
:mod:`vladbench.errors`; the ``pack_*`` helpers build it.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)


def pack_u16(value: int) -> bytes:
    return struct.pack("<H", value)


def pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def pack_u64(value: int) -> bytes:
    return struct.pack("<Q", value)


def pack_f64(value: float) -> bytes:
    return struct.pack("<d", value)


def pack_str(text: str) -> bytes:
    """u32 byte length followed by UTF-8 bytes."""
    raw = text.encode("utf-8")
    return pack_u32(len(raw)) + raw


def pack_f32_array(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def pack_f64_array(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


class ByteReader:
    """Sequential decoder over an in-memory buffer.

    All reads raise ``TruncatedFileError`` when the buffer ends early, so
    callers never need their own bounds checks.
    """

    def __init__(self, data: bytes, source: str = "<bytes>") -> None:
        self._data = data
        self._offset = 0
        self._source = source

    def take(self, count: int) -> bytes:
        end = self._offset + count
        if end > len(self._data):
            raise TruncatedFileError(
                f"{self._source}: expected {count} more bytes at offset "
                f"{self._offset}, file has {len(self._data)}"
            )
        chunk = self._data[self._offset : end]
        self._offset = end
        return chunk

    def expect_magic(self, magic: bytes, format_name: str) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise BadMagicError(
                f"{self._source}: not a {format_name} file "
                f"(magic {got!r}, expected {magic!r})"
            )

    def expect_version(self, supported: int) -> int:
        version = self.u16()
        if version != supported:
            raise UnsupportedVersionError(
                f"{self._source}: format version {version} not supported "
                f"(expected {supported})"
            )
        return version

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def str_u32(self) -> str:
        length = self.u32()
        raw = self.take(length)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self._source}: invalid UTF-8 in string field") from exc

    def f32_array(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float32)

    def f64_array(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8", count=count).astype(np.float64)

    def expect_end(self) -> None:
        remaining = len(self._data) - self._offset
        if remaining:
            raise FormatError(
                f"{self._source}: {remaining} trailing bytes after payload"
            )
