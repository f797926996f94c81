"""Canonical Event Log records: encoding, decoding and structural checks.

Record layout (fixed field order, all integers big-endian)::

    [0x00][8][recnum u64]
    [0x01][4][pcr_index u32]
    [0x02][n][ ([alg 1B][len 4B][digest])+ ]
    [0x03][m][content_type 1B][payload]

A log is records concatenated with no header.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterable

from . import tlv
from .tlv import DecodeError, Truncated, UnknownTag

__all__ = [
    "HashAlg", "Digest", "ContentType", "CelContent", "CelRecord", "CelLog",
    "LogSource", "ValidationReport",
    "encode_record", "decode_record", "encode_log", "decode_log",
    "validate_log_for_source",
    "CelError", "InvalidRecord", "DigestLengthMismatch", "UnknownAlgorithm",
    "SequenceViolation", "DecodeError", "Truncated", "UnknownTag",
    "NUM_PCRS", "MAX_PAYLOAD",
]

NUM_PCRS = 24
MAX_PAYLOAD = 1 << 24

TAG_RECNUM = 0x00
TAG_PCR = 0x01
TAG_DIGESTS = 0x02
TAG_CONTENT = 0x03


class CelError(DecodeError):
    pass


class InvalidRecord(CelError):
    pass


class DigestLengthMismatch(CelError):
    pass


class UnknownAlgorithm(CelError):
    pass


class SequenceViolation(CelError):
    pass


class HashAlg(enum.IntEnum):
    SHA1 = 0x04
    SHA256 = 0x0B

    @property
    def digest_len(self) -> int:
        return 20 if self is HashAlg.SHA1 else 32

    def hash(self, data: bytes) -> bytes:
        return hashlib.new(self.name.lower(), data).digest()


@dataclass(frozen=True)
class Digest:
    alg: HashAlg
    value: bytes

    def __post_init__(self):
        if len(self.value) != HashAlg(self.alg).digest_len:
            raise DigestLengthMismatch(
                f"{HashAlg(self.alg).name} digest must be {HashAlg(self.alg).digest_len} bytes, got {len(self.value)}"
            )

    @classmethod
    def of(cls, alg: HashAlg, data: bytes) -> "Digest":
        return cls(alg, alg.hash(data))


class ContentType(enum.IntEnum):
    PCCLIENT_INFO = 0x01
    FIRMWARE = 0x02
    IMA = 0x03


@dataclass(frozen=True)
class CelContent:
    content_type: ContentType
    payload: bytes = b""


@dataclass(frozen=True)
class CelRecord:
    recnum: int
    pcr_index: int
    digests: tuple[Digest, ...]
    content: CelContent

    def __post_init__(self):
        # lists are accepted for convenience but stored as tuples so records hash
        object.__setattr__(self, "digests", tuple(self.digests))

    def digest(self, alg: HashAlg) -> bytes | None:
        for d in self.digests:
            if d.alg == alg:
                return d.value
        return None


@dataclass(frozen=True)
class CelLog:
    records: tuple[CelRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _check_record(r: CelRecord) -> None:
    if not 0 <= r.recnum < 1 << 64:
        raise InvalidRecord(f"recnum {r.recnum} out of u64 range")
    if not 0 <= r.pcr_index < NUM_PCRS:
        raise InvalidRecord(f"pcr_index {r.pcr_index} outside [0, {NUM_PCRS - 1}]")
    if not r.digests:
        raise InvalidRecord("record carries no digests")
    algs = [d.alg for d in r.digests]
    if len(set(algs)) != len(algs):
        raise InvalidRecord("duplicate digest algorithm")
    for d in r.digests:
        if d.alg not in HashAlg.__members__.values():
            raise UnknownAlgorithm(f"unknown algorithm id 0x{int(d.alg):02x}")
        if len(d.value) != HashAlg(d.alg).digest_len:
            raise DigestLengthMismatch(f"{HashAlg(d.alg).name} digest has {len(d.value)} bytes")
    if r.content.content_type not in ContentType.__members__.values():
        raise InvalidRecord(f"content type 0x{int(r.content.content_type):02x} not allowed")
    if len(r.content.payload) > MAX_PAYLOAD:
        raise InvalidRecord(f"payload of {len(r.content.payload)} bytes exceeds {MAX_PAYLOAD}")


def encode_record(r: CelRecord) -> bytes:
    _check_record(r)
    digests = b"".join(tlv.pack(int(d.alg), d.value) for d in r.digests)
    return b"".join((
        tlv.pack(TAG_RECNUM, tlv.u64(r.recnum)),
        tlv.pack(TAG_PCR, tlv.u32(r.pcr_index)),
        tlv.pack(TAG_DIGESTS, digests),
        tlv.pack(TAG_CONTENT, tlv.u8(r.content.content_type) + r.content.payload),
    ))


def _decode_digests(buf: bytes, base: int) -> tuple[Digest, ...]:
    out = []
    seen = set()
    offset = 0
    if not buf:
        raise InvalidRecord("empty digest list", base)
    while offset < len(buf):
        tag, value, nxt = tlv.read(buf, offset, base)
        try:
            alg = HashAlg(tag)
        except ValueError:
            raise UnknownAlgorithm(f"unknown algorithm id 0x{tag:02x}", base + offset) from None
        if len(value) != alg.digest_len:
            raise DigestLengthMismatch(
                f"{alg.name} digest length {len(value)} != {alg.digest_len}", base + offset
            )
        if alg in seen:
            raise InvalidRecord(f"duplicate {alg.name} digest", base + offset)
        seen.add(alg)
        out.append(Digest(alg, value))
        offset = nxt
    return tuple(out)


def decode_record(buf: bytes, offset: int = 0) -> tuple[CelRecord, int]:
    """Decode the record starting at ``offset``; returns ``(record, bytes_consumed)``."""
    start = offset
    value, offset = tlv.read_expected(buf, offset, TAG_RECNUM)
    recnum = tlv.to_int(value, 8, start)

    field_at = offset
    value, offset = tlv.read_expected(buf, offset, TAG_PCR)
    pcr = tlv.to_int(value, 4, field_at)
    if pcr >= NUM_PCRS:
        raise InvalidRecord(f"pcr_index {pcr} outside [0, {NUM_PCRS - 1}]", field_at)

    field_at = offset
    value, offset = tlv.read_expected(buf, offset, TAG_DIGESTS)
    digests = _decode_digests(value, field_at + tlv.HEADER_LEN)

    field_at = offset
    value, offset = tlv.read_expected(buf, offset, TAG_CONTENT, limit=MAX_PAYLOAD + 1)
    if not value:
        raise InvalidRecord("content lacks a type byte", field_at)
    try:
        ctype = ContentType(value[0])
    except ValueError:
        raise InvalidRecord(f"content type 0x{value[0]:02x} not allowed", field_at) from None

    rec = CelRecord(recnum, pcr, digests, CelContent(ctype, bytes(value[1:])))
    return rec, offset - start


def encode_log(log: CelLog | Iterable[CelRecord]) -> bytes:
    records = list(log)
    for i, r in enumerate(records):
        if r.recnum != i:
            raise SequenceViolation(f"record {i} has recnum {r.recnum}")
    return b"".join(encode_record(r) for r in records)


def decode_log(buf: bytes) -> CelLog:
    records = []
    offset = 0
    while offset < len(buf):
        rec, used = decode_record(buf, offset)
        if rec.recnum != len(records):
            raise SequenceViolation(f"expected recnum {len(records)}, found {rec.recnum}", offset)
        records.append(rec)
        offset += used
    return CelLog(tuple(records))


class LogSource(str, enum.Enum):
    FIRMWARE = "firmware"
    IMA = "ima"


@dataclass(frozen=True)
class ValidationReport:
    source: LogSource
    offending: tuple[int, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.offending


def validate_log_for_source(log: CelLog, source: LogSource | str) -> ValidationReport:
    """Firmware records must target PCR 0-9, IMA records PCR 10."""
    source = LogSource(source)
    if source is LogSource.FIRMWARE:
        bad = [r.recnum for r in log if not 0 <= r.pcr_index <= 9]
    else:
        bad = [r.recnum for r in log if r.pcr_index != 10]
    return ValidationReport(source, tuple(bad))


def to_debug_text(log: CelLog) -> str:
    """Line-oriented hex rendering of a log; :func:`from_debug_text` inverts it."""
    lines = []
    for r in log:
        lines.append(f"recnum {r.recnum:016x}")
        lines.append(f"pcr {r.pcr_index:08x}")
        for d in r.digests:
            lines.append(f"digest {int(d.alg):02x} {d.value.hex()}")
        lines.append(f"content {int(r.content.content_type):02x} {r.content.payload.hex()}".rstrip())
        lines.append("end")
    return "\n".join(lines) + ("\n" if lines else "")


def from_debug_text(text: str) -> CelLog:
    records = []
    cur: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            key = parts[0]
            if key == "recnum":
                cur = {"recnum": int(parts[1], 16), "digests": []}
            elif key == "pcr":
                cur["pcr"] = int(parts[1], 16)
            elif key == "digest":
                cur["digests"].append(Digest(HashAlg(int(parts[1], 16)), bytes.fromhex(parts[2])))
            elif key == "content":
                payload = bytes.fromhex(parts[2]) if len(parts) > 2 else b""
                cur["content"] = CelContent(ContentType(int(parts[1], 16)), payload)
            elif key == "end":
                rec = CelRecord(cur["recnum"], cur["pcr"], tuple(cur["digests"]), cur["content"])
                _check_record(rec)
                records.append(rec)
                cur = {}
            else:
                raise ValueError(f"unknown field {key!r}")
        except (KeyError, IndexError, ValueError) as exc:
            raise CelError(f"debug text line {lineno}: {exc}", lineno) from exc
    if cur:
        raise Truncated("debug text ends inside a record", len(text))
    log = CelLog(tuple(records))
    encode_log(log)  # enforces recnum sequence
    return log
