"""Little-endian header helpers and CRC-64 shared by the KB and checkpoint formats."""

import struct

from core.errors import BadMagicError, ChecksumError, TruncatedFileError, VersionMismatchError

# CRC-64/XZ: ECMA-182 polynomial, reflected, init and xorout all ones.
_CRC64_POLY = 0xC96C5795D7870F42
_MASK = 0xFFFFFFFFFFFFFFFF


def _make_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _make_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ of `data`; pass a previous result as `crc` to continue a running checksum."""
    table = _TABLE
    crc = crc ^ _MASK
    for b in memoryview(data).cast("B"):
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ _MASK


class Reader:
    """Cursor over a byte buffer that raises TruncatedFileError instead of short reads."""

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.what} truncated: needed {n} bytes at offset {self.pos}, {len(self.buf) - self.pos} available"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def remaining(self) -> int:
        return len(self.buf) - self.pos


def check_magic(reader: Reader, magic: bytes) -> None:
    found = reader.take(len(magic))
    if found != magic:
        raise BadMagicError(f"{reader.what}: bad magic {found!r}, expected {magic!r}")


def check_version(found: int, expected: int, what: str) -> None:
    if found != expected:
        raise VersionMismatchError(found, expected, what)


def split_checksum(buf: bytes, what: str) -> bytes:
    """Verify the trailing CRC-64 and return the covered payload."""
    if len(buf) < 8:
        raise TruncatedFileError(f"{what} truncated: {len(buf)} bytes")
    body, trailer = buf[:-8], buf[-8:]
    (stored,) = struct.unpack("<Q", trailer)
    actual = crc64(body)
    if stored != actual:
        raise ChecksumError(f"{what} checksum mismatch: stored {stored:016x}, computed {actual:016x}")
    return body


def with_checksum(body: bytes) -> bytes:
    return body + struct.pack("<Q", crc64(body))
