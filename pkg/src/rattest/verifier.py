"""Verifier judgment: log replay, golden-measurement comparison, quote checks and the verdict."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import tlv
from .cel import (
    NUM_PCRS, CelLog, CelRecord, HashAlg, LogSource, decode_log, encode_record,
    validate_log_for_source,
)
from .credentials import ChainStatus, Credential, Role, TrustAnchorSet, validate_platform
from .tpm import NV_EK_CERT, NV_PLATFORM_CERT, Quote, pcr_composite, verify_signature

CHECKS = (
    "cert_chain", "binding", "nv_certs", "firmware_log", "ima_log",
    "quote_signature", "pcr_match", "nonce_match",
)


class VerifierError(Exception):
    pass


class MissingSha256Digest(VerifierError):
    pass


class DeviceUnknown(VerifierError, LookupError):
    pass


@dataclass(frozen=True)
class ReplayResult:
    pcr_values: tuple[bytes, ...]

    def composite(self, selection: bytes) -> bytes:
        return pcr_composite(self.pcr_values, selection)


def replay_log(*logs: CelLog) -> ReplayResult:
    """Fold SHA-256 record digests into a fresh bank, logs applied in the order given."""
    pcrs = [bytes(32)] * NUM_PCRS
    for log in logs:
        for rec in log:
            d = rec.digest(HashAlg.SHA256)
            if d is None:
                raise MissingSha256Digest(f"record {rec.recnum} has no SHA-256 digest")
            pcrs[rec.pcr_index] = hashlib.sha256(pcrs[rec.pcr_index] + d).digest()
    return ReplayResult(tuple(pcrs))


@dataclass(frozen=True)
class RimEntry:
    """Expected record at one position: its PCR, SHA-256 event digest and a hash of the whole encoded record."""

    pcr_index: int
    digest: bytes
    record_hash: bytes

    @classmethod
    def from_record(cls, rec: CelRecord) -> "RimEntry":
        d = rec.digest(HashAlg.SHA256)
        if d is None:
            raise MissingSha256Digest(f"record {rec.recnum} has no SHA-256 digest")
        return cls(rec.pcr_index, d, hashlib.sha256(encode_record(rec)).digest())

    def encode(self) -> bytes:
        return tlv.u32(self.pcr_index) + self.digest + self.record_hash

    @classmethod
    def decode(cls, buf: bytes) -> "RimEntry":
        if len(buf) != 68:
            raise tlv.DecodeError("RIM entry must be 68 bytes")
        return cls(int.from_bytes(buf[:4], "big"), buf[4:36], buf[36:])


def rim_from_log(log: CelLog) -> tuple[RimEntry, ...]:
    return tuple(RimEntry.from_record(r) for r in log)


class Finding(str, enum.Enum):
    MATCH = "match"
    DIGEST_MISMATCH = "digest_mismatch"
    PCR_MISMATCH = "pcr_mismatch"
    CONTENT_MISMATCH = "content_mismatch"
    UNEXPECTED_RECORD = "unexpected_record"
    MISSING_RECORD = "missing_record"


@dataclass(frozen=True)
class RimFinding:
    recnum: int
    kind: Finding


def compare_rim(log: CelLog, rim: Sequence[RimEntry], source: LogSource | str) -> list[RimFinding]:
    """Positional comparison of ``log`` against golden entries.

    Anything outside the PCR range allowed for ``source`` is reported as a
    mismatch as well, so callers need not validate separately.
    """
    allowed = set(validate_log_for_source(log, source).offending)
    out = []
    for i, rec in enumerate(log):
        if i >= len(rim):
            out.append(RimFinding(rec.recnum, Finding.UNEXPECTED_RECORD))
            continue
        want = rim[i]
        if rec.digest(HashAlg.SHA256) != want.digest:
            kind = Finding.DIGEST_MISMATCH
        elif rec.pcr_index != want.pcr_index or rec.recnum in allowed:
            kind = Finding.PCR_MISMATCH
        elif hashlib.sha256(encode_record(rec)).digest() != want.record_hash:
            kind = Finding.CONTENT_MISMATCH
        else:
            kind = Finding.MATCH
        out.append(RimFinding(rec.recnum, kind))
    for i in range(len(log), len(rim)):
        out.append(RimFinding(i, Finding.MISSING_RECORD))
    return out


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    detail: str = ""

    def __str__(self):
        return "pass" if self.passed else f"fail: {self.detail}"


PASS = CheckResult(True)


def fail(detail: str) -> CheckResult:
    return CheckResult(False, detail)


def verify_quote(q: Quote, ak_public: bytes, expected_nonce: bytes, replay: ReplayResult | None) -> dict[str, CheckResult]:
    out = {}
    out["quote_signature"] = (
        PASS if verify_signature(ak_public, q.signature, q.body.message_digest())
        else fail("signature does not verify under enrolled AK")
    )
    out["nonce_match"] = PASS if q.body.qualifying_data == expected_nonce else fail("quote nonce is not the one issued")
    if replay is None:
        out["pcr_match"] = fail("event logs could not be replayed")
    elif replay.composite(q.body.pcr_selection) != q.body.pcr_digest:
        out["pcr_match"] = fail("replayed PCR digest differs from quoted digest")
    else:
        out["pcr_match"] = PASS
    return out


_T_DEVICE = 0x30
_T_FW_RIM = 0x31
_T_IMA_RIM = 0x32
_T_CREDS = 0x33
_T_AK = 0x34
_T_INFO = 0x35


def encode_kv(items: Mapping[str, str]) -> bytes:
    return b"".join(
        tlv.pack(0x01, tlv.pack(0x01, k.encode()) + tlv.pack(0x02, v.encode())) for k, v in items.items()
    )


def decode_kv(buf: bytes) -> dict[str, str]:
    out = {}
    for _, entry in tlv.iterate(buf):
        k, v = tlv.decode_fields(entry, (0x01, 0x02))
        out[k.decode()] = v.decode()
    return out


@dataclass
class GoldenTemplate:
    """Enrolled ground truth for one device.

    Attributes:
      credentials: enrolled credential encodings keyed by role.
      device_info: free-form fields reported at enrollment (bios, os, ...).
    """

    device_id: str
    firmware_rim: tuple[RimEntry, ...]
    ima_rim: tuple[RimEntry, ...]
    credentials: dict[Role, bytes]
    ak_public: bytes
    device_info: dict[str, str] = field(default_factory=dict)

    @property
    def cert_fingerprints(self) -> dict[Role, bytes]:
        return {role: Credential.decode(raw).fingerprint for role, raw in self.credentials.items()}

    def encode(self) -> bytes:
        creds = b"".join(tlv.pack(role.code, raw) for role, raw in self.credentials.items())
        return b"".join((
            tlv.pack(_T_DEVICE, self.device_id.encode()),
            tlv.pack(_T_FW_RIM, b"".join(tlv.pack(0x01, e.encode()) for e in self.firmware_rim)),
            tlv.pack(_T_IMA_RIM, b"".join(tlv.pack(0x01, e.encode()) for e in self.ima_rim)),
            tlv.pack(_T_CREDS, creds),
            tlv.pack(_T_AK, self.ak_public),
            tlv.pack(_T_INFO, encode_kv(self.device_info)),
        ))

    @classmethod
    def decode(cls, buf: bytes) -> "GoldenTemplate":
        dev, fw, ima, creds, ak, info = tlv.decode_fields(buf, (_T_DEVICE, _T_FW_RIM, _T_IMA_RIM, _T_CREDS, _T_AK, _T_INFO))
        return cls(
            device_id=dev.decode(),
            firmware_rim=tuple(RimEntry.decode(v) for _, v in tlv.iterate(fw)),
            ima_rim=tuple(RimEntry.decode(v) for _, v in tlv.iterate(ima)),
            credentials={Role.from_code(t): v for t, v in tlv.iterate(creds)},
            ak_public=ak,
            device_info=decode_kv(info),
        )

    @classmethod
    def enroll(cls, device_id: str, credentials: Iterable[Credential], firmware_log: CelLog,
               ima_log: CelLog, device_info: Mapping[str, str] | None = None) -> "GoldenTemplate":
        creds = {c.role: c for c in credentials}
        if Role.AK not in creds:
            raise ValueError("enrollment requires an AK credential")
        return cls(
            device_id=device_id,
            firmware_rim=rim_from_log(firmware_log),
            ima_rim=rim_from_log(ima_log),
            credentials={r: c.encode() for r, c in creds.items()},
            ak_public=creds[Role.AK].public_key,
            device_info=dict(device_info or {}),
        )


@dataclass
class AttestationBundle:
    """What a prover presents at attestation time.

    Logs, credentials and the quote may be given decoded or as raw bytes; raw
    input that fails to decode fails the corresponding check.
    """

    credentials: list
    nv_certs: dict[int, bytes]
    firmware_log: CelLog | bytes
    ima_log: CelLog | bytes
    quote: Quote | bytes


@dataclass
class AttestationVerdict:
    checks: dict[str, CheckResult]

    @property
    def overall(self) -> bool:
        return all(self.checks[name].passed for name in CHECKS)

    def failed(self) -> list[str]:
        return [n for n in CHECKS if not self.checks[n].passed]

    def to_dict(self) -> dict[str, str]:
        out = {name: str(self.checks[name]) for name in CHECKS}
        out["overall"] = "pass" if self.overall else "fail"
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "AttestationVerdict":
        checks = {}
        for name in CHECKS:
            v = d[name]
            checks[name] = PASS if v == "pass" else fail(v.partition(": ")[2])
        return cls(checks)

    def report(self) -> str:
        lines = [f"{name:16} {self.checks[name]}" for name in CHECKS]
        lines.append(f"{'overall':16} {'pass' if self.overall else 'fail'}")
        return "\n".join(lines)


def _as_log(raw) -> CelLog:
    return raw if isinstance(raw, CelLog) else decode_log(raw)


def _log_check(raw, rim, source) -> tuple[CheckResult, CelLog | None]:
    try:
        log = _as_log(raw)
    except (tlv.DecodeError, ValueError) as exc:
        return fail(f"undecodable log: {exc}"), None
    bad = [f for f in compare_rim(log, rim, source) if f.kind != Finding.MATCH]
    if bad:
        shown = ", ".join(f"{f.recnum}:{f.kind.value}" for f in bad[:5])
        return fail(f"{len(bad)} record finding(s): {shown}"), log
    return PASS, log


def attest(bundle: AttestationBundle, golden: GoldenTemplate | None, expected_nonce: bytes,
           anchors: TrustAnchorSet) -> AttestationVerdict:
    if golden is None:
        raise DeviceUnknown("device is not enrolled")
    checks: dict[str, CheckResult] = {}

    try:
        creds = [c if isinstance(c, Credential) else Credential.decode(c) for c in bundle.credentials]
    except (tlv.DecodeError, ValueError) as exc:
        creds = None
        checks["cert_chain"] = fail(f"undecodable credential: {exc}")
        checks["binding"] = fail("credentials unavailable")
    if creds is not None:
        report = validate_platform(creds, anchors)
        bad = {k: v.value for k, v in report.chains.items() if v != ChainStatus.OK}
        checks["cert_chain"] = PASS if not bad else fail(", ".join(f"{k}={v}" for k, v in sorted(bad.items())))
        roles = {c.role: c for c in creds}
        enrolled = golden.cert_fingerprints
        stale = [r.value for r in (Role.EK, Role.PLATFORM, Role.PLATFORM_ATTRIBUTES)
                 if r in roles and enrolled.get(r) != roles[r].fingerprint]
        if report.binding.value != "ok":
            checks["binding"] = fail(report.binding.value)
        elif stale:
            checks["binding"] = fail("differs from enrolled: " + ", ".join(stale))
        else:
            checks["binding"] = PASS

    nv_bad = [name for index, role, name in ((NV_EK_CERT, Role.EK, "ek"), (NV_PLATFORM_CERT, Role.PLATFORM, "platform"))
              if bundle.nv_certs.get(index) is None or bundle.nv_certs.get(index) != golden.credentials.get(role)]
    checks["nv_certs"] = PASS if not nv_bad else fail("NV copy differs from enrolled: " + ", ".join(nv_bad))

    checks["firmware_log"], fw = _log_check(bundle.firmware_log, golden.firmware_rim, LogSource.FIRMWARE)
    checks["ima_log"], ima = _log_check(bundle.ima_log, golden.ima_rim, LogSource.IMA)

    replay = None
    if fw is not None and ima is not None:
        try:
            replay = replay_log(fw, ima)
        except MissingSha256Digest:
            replay = None
    try:
        quote = bundle.quote if isinstance(bundle.quote, Quote) else Quote.decode(bundle.quote)
    except (tlv.DecodeError, ValueError) as exc:
        for name in ("quote_signature", "pcr_match", "nonce_match"):
            checks[name] = fail(f"undecodable quote: {exc}")
    else:
        checks.update(verify_quote(quote, golden.ak_public, expected_nonce, replay))
    return AttestationVerdict(checks)
