"""Measured boot and IMA simulation driving a :class:`~rattest.tpm.TpmState`.

Each firmware component is loaded, measured, extended into its PCR on both
banks and logged before the next one runs. IMA measurements go to PCR 10.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .cel import CelContent, CelLog, CelRecord, ContentType, Digest, HashAlg
from .tpm import TpmState

IMA_PCR = 10

# Record 0 of every firmware log; measured like any other event.
PCCLIENT_INFO_PAYLOAD = (
    b"PC-Client spec-id event; platform-firmware=sim-bios-1.0; "
    b"crypto-agile=1; algorithms=sha1,sha256"
)


class MeasurementError(ValueError):
    pass


class InvalidImage(MeasurementError):
    pass


class RecordAbsent(MeasurementError, LookupError):
    pass


class ComponentKind(str, enum.Enum):
    SRTM = "srtm"
    FIRMWARE = "firmware"
    BOOTLOADER = "bootloader"
    OS = "os"


@dataclass(frozen=True)
class FirmwareComponent:
    name: str
    code: bytes
    pcr_index: int
    kind: ComponentKind


@dataclass(frozen=True)
class BootImage:
    components: tuple[FirmwareComponent, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))

    def validate(self) -> None:
        comps = self.components
        if not comps:
            raise InvalidImage("boot image has no components")
        if comps[0].kind != ComponentKind.SRTM:
            raise InvalidImage("first component must be the S-RTM")
        if sum(c.kind == ComponentKind.SRTM for c in comps) != 1:
            raise InvalidImage("exactly one S-RTM component allowed")
        for c in comps:
            kind = ComponentKind(c.kind)
            if kind in (ComponentKind.BOOTLOADER, ComponentKind.OS):
                if c.pcr_index not in (8, 9):
                    raise InvalidImage(f"{c.name}: {kind.value} must use PCR 8 or 9")
            elif not 0 <= c.pcr_index <= 7:
                raise InvalidImage(f"{c.name}: {kind.value} must use PCR 0-7")


@dataclass(frozen=True)
class MeasuredFile:
    path: str
    contents: bytes


def _extend_both(tpm: TpmState, index: int, data_sha1: bytes, data_sha256: bytes):
    d1 = Digest(HashAlg.SHA1, data_sha1)
    d256 = Digest(HashAlg.SHA256, data_sha256)
    tpm.pcr_extend(HashAlg.SHA1, index, d1)
    tpm.pcr_extend(HashAlg.SHA256, index, d256)
    return (d1, d256)


def boot(image: BootImage, tpm: TpmState) -> CelLog:
    """Run the boot chain; returns the firmware event log."""
    image.validate()
    if not tpm.at_reset():
        raise InvalidImage("TPM must be at reset before boot")

    records = []
    info = PCCLIENT_INFO_PAYLOAD
    digests = _extend_both(tpm, 0, hashlib.sha1(info).digest(), hashlib.sha256(info).digest())
    records.append(CelRecord(0, 0, digests, CelContent(ContentType.PCCLIENT_INFO, info)))

    for comp in image.components:
        digests = _extend_both(
            tpm, comp.pcr_index, hashlib.sha1(comp.code).digest(), hashlib.sha256(comp.code).digest()
        )
        records.append(CelRecord(
            len(records), comp.pcr_index, digests,
            CelContent(ContentType.FIRMWARE, comp.name.encode()),
        ))
    return CelLog(tuple(records))


def ima_measure(files: Sequence[MeasuredFile], tpm: TpmState) -> CelLog:
    paths = [f.path for f in files]
    if len(set(paths)) != len(paths):
        raise MeasurementError("duplicate path in measurement run")
    records = []
    for f in files:
        # path and contents are separated so one cannot be spliced into the other
        blob = f.path.encode() + b"\x00" + f.contents
        d256 = hashlib.sha256(blob).digest()
        digests = _extend_both(tpm, IMA_PCR, hashlib.sha1(blob).digest(), d256)
        records.append(CelRecord(
            len(records), IMA_PCR, digests,
            CelContent(ContentType.IMA, f.path.encode() + b"\x00" + d256),
        ))
    return CelLog(tuple(records))


def tamper(log: CelLog, recnum: int, mutation: str = "payload", position: int = 0, xor: int = 0x01) -> CelLog:
    """Return a copy of ``log`` with one byte of one record flipped.

    ``mutation`` selects ``"payload"`` or ``"digest"`` (the SHA-256 digest
    when present). ``position`` wraps around the field length; an empty
    payload gains a single byte instead.
    """
    if not 0 <= recnum < len(log) or log[recnum].recnum != recnum:
        raise RecordAbsent(f"no record {recnum}")
    if not xor & 0xFF:
        raise ValueError("xor must change the byte")
    rec = log[recnum]
    if mutation == "payload":
        payload = bytearray(rec.content.payload) or bytearray(1)
        payload[position % len(payload)] ^= xor
        new = dataclasses.replace(rec, content=CelContent(rec.content.content_type, bytes(payload)))
    elif mutation == "digest":
        target = next((d for d in rec.digests if d.alg == HashAlg.SHA256), rec.digests[0])
        value = bytearray(target.value)
        value[position % len(value)] ^= xor
        digests = tuple(Digest(d.alg, bytes(value)) if d is target else d for d in rec.digests)
        new = dataclasses.replace(rec, digests=digests)
    else:
        raise ValueError(f"unknown mutation {mutation!r}")
    records = list(log.records)
    records[recnum] = new
    return CelLog(tuple(records))


def parse_manifest(text: str, base_dir: Path | str = ".") -> BootImage:
    """Parse ``kind pcr_index name hex_or_@file`` lines; ``#`` starts a comment."""
    base = Path(base_dir)
    comps = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise InvalidImage(f"manifest line {lineno}: expected 4 fields, got {len(parts)}")
        kind, pcr, name, src = parts
        try:
            kind_ = ComponentKind(kind)
            pcr_ = int(pcr)
            code = (base / src[1:]).read_bytes() if src.startswith("@") else bytes.fromhex(src)
        except (ValueError, OSError) as exc:
            raise InvalidImage(f"manifest line {lineno}: {exc}") from exc
        comps.append(FirmwareComponent(name, code, pcr_, kind_))
    image = BootImage(tuple(comps))
    image.validate()
    return image


def collect_files(root: Path | str) -> list[MeasuredFile]:
    """Every regular file under ``root`` in sorted order, keyed by its path relative to ``root``."""
    root = Path(root)
    return [
        MeasuredFile("/" + p.relative_to(root).as_posix(), p.read_bytes())
        for p in sorted(root.rglob("*")) if p.is_file()
    ]


def measure_all(image: BootImage, files: Iterable[MeasuredFile], tpm: TpmState) -> tuple[CelLog, CelLog]:
    return boot(image, tpm), ima_measure(list(files), tpm)
