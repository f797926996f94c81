"""Tag/length/value primitives shared by every binary format in the package.

Each field is ``[tag 1B][length 4B big-endian][value]``.
"""

from __future__ import annotations

import struct
from typing import Iterator, Sequence

HEADER_LEN = 5
_HEADER = struct.Struct(">BI")


class DecodeError(ValueError):
    """Base class for malformed binary input.

    Attributes:
      offset (int): byte offset in the outermost buffer where decoding failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Truncated(DecodeError):
    pass


class UnknownTag(DecodeError):
    pass


def pack(tag: int, value: bytes) -> bytes:
    return _HEADER.pack(tag, len(value)) + value


def u8(v: int) -> bytes:
    return struct.pack(">B", v)


def u32(v: int) -> bytes:
    return struct.pack(">I", v)


def u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def read(buf: bytes, offset: int = 0, base: int = 0, limit: int | None = None):
    """Read one TLV at ``offset``; returns ``(tag, value, next_offset)``.

    ``base`` is added to offsets reported in errors so nested decoders can
    point into the outer buffer. ``limit`` caps the accepted value length.
    """
    if len(buf) - offset < HEADER_LEN:
        raise Truncated("incomplete TLV header", base + offset)
    tag, length = _HEADER.unpack_from(buf, offset)
    if limit is not None and length > limit:
        raise DecodeError(f"TLV tag 0x{tag:02x} length {length} exceeds {limit}", base + offset)
    start = offset + HEADER_LEN
    if len(buf) - start < length:
        raise Truncated(
            f"TLV tag 0x{tag:02x} declares {length} bytes, {len(buf) - start} remain",
            base + offset,
        )
    return tag, buf[start:start + length], start + length


def read_expected(buf: bytes, offset: int, tag: int, base: int = 0, limit: int | None = None):
    got, value, nxt = read(buf, offset, base, limit)
    if got != tag:
        raise UnknownTag(f"expected tag 0x{tag:02x}, found 0x{got:02x}", base + offset)
    return value, nxt


def iterate(buf: bytes, base: int = 0) -> Iterator[tuple[int, bytes]]:
    offset = 0
    while offset < len(buf):
        tag, value, offset = read(buf, offset, base)
        yield tag, value


def decode_fields(buf: bytes, tags: Sequence[int], base: int = 0) -> list[bytes]:
    """Decode a fixed-order sequence of TLVs that must consume ``buf`` exactly."""
    out = []
    offset = 0
    for tag in tags:
        value, offset = read_expected(buf, offset, tag, base)
        out.append(value)
    if offset != len(buf):
        raise DecodeError(f"{len(buf) - offset} trailing bytes", base + offset)
    return out


def decode_map(buf: bytes, base: int = 0, required: Sequence[int] = ()) -> dict[int, bytes]:
    """Decode TLVs into a tag->value map; duplicate tags and missing required tags are errors."""
    out: dict[int, bytes] = {}
    offset = 0
    while offset < len(buf):
        tag, value, nxt = read(buf, offset, base)
        if tag in out:
            raise DecodeError(f"duplicate tag 0x{tag:02x}", base + offset)
        out[tag] = value
        offset = nxt
    for tag in required:
        if tag not in out:
            raise Truncated(f"missing tag 0x{tag:02x}", base + len(buf))
    return out


def to_int(value: bytes, width: int, offset: int = 0) -> int:
    if len(value) != width:
        raise DecodeError(f"expected {width}-byte integer, got {len(value)}", offset)
    return int.from_bytes(value, "big")
