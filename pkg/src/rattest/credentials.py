"""Supplier credential hierarchy and platform/TPM binding checks.

Credentials are a compact signed TLV structure rather than X.509. Field tags
0x20-0x27 appear in fixed order; the fingerprint is SHA-256 over the
encoding with the signature field omitted, and issuers sign that fingerprint.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import tlv
from .tpm import public_bytes, verify_signature

MAX_DEPTH = 8

TAG_SERIAL = 0x20
TAG_ROLE = 0x21
TAG_SUBJECT = 0x22
TAG_ISSUER = 0x23
TAG_PUBKEY = 0x24
TAG_ATTRS = 0x25
TAG_REFS = 0x26
TAG_SIGNATURE = 0x27

_TAG_ATTR = 0x01
_TAG_KEY = 0x01
_TAG_VALUE = 0x02


class Role(str, enum.Enum):
    ROOT_CA = "root_ca"
    TPM_VENDOR_CA = "tpm_vendor_ca"
    EK = "ek"
    PLATFORM = "platform"
    PLATFORM_ATTRIBUTES = "platform_attributes"
    AK = "ak"

    @property
    def code(self) -> int:
        return _ROLE_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Role":
        for role, c in _ROLE_CODES.items():
            if c == code:
                return role
        raise tlv.DecodeError(f"unknown role code {code}")


_ROLE_CODES = {r: i + 1 for i, r in enumerate(Role)}

ISSUANCE = {
    Role.ROOT_CA: {Role.ROOT_CA, Role.TPM_VENDOR_CA, Role.PLATFORM, Role.PLATFORM_ATTRIBUTES},
    Role.TPM_VENDOR_CA: {Role.EK},
    Role.EK: {Role.AK},
}


class CredentialError(Exception):
    pass


class RoleViolation(CredentialError):
    pass


class EkMissing(CredentialError):
    pass


class Signer(Protocol):
    def sign(self, message: bytes) -> bytes: ...


@dataclass(frozen=True)
class Credential:
    serial: int
    role: Role
    subject: str
    issuer_serial: int
    public_key: bytes
    attributes: tuple[tuple[str, str], ...] = ()
    bound_refs: tuple[tuple[Role, bytes], ...] = ()
    signature: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "attributes", tuple((str(k), str(v)) for k, v in self.attributes))
        object.__setattr__(self, "bound_refs", tuple((Role(r), bytes(fp)) for r, fp in self.bound_refs))

    def preimage(self) -> bytes:
        attrs = b"".join(
            tlv.pack(_TAG_ATTR, tlv.pack(_TAG_KEY, k.encode()) + tlv.pack(_TAG_VALUE, v.encode()))
            for k, v in self.attributes
        )
        refs = b"".join(tlv.pack(role.code, fp) for role, fp in self.bound_refs)
        return b"".join((
            tlv.pack(TAG_SERIAL, tlv.u64(self.serial)),
            tlv.pack(TAG_ROLE, tlv.u8(self.role.code)),
            tlv.pack(TAG_SUBJECT, self.subject.encode()),
            tlv.pack(TAG_ISSUER, tlv.u64(self.issuer_serial)),
            tlv.pack(TAG_PUBKEY, self.public_key),
            tlv.pack(TAG_ATTRS, attrs),
            tlv.pack(TAG_REFS, refs),
        ))

    @property
    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.preimage()).digest()

    def encode(self) -> bytes:
        return self.preimage() + tlv.pack(TAG_SIGNATURE, self.signature)

    @classmethod
    def decode(cls, buf: bytes) -> "Credential":
        serial, role, subject, issuer, pub, attrs, refs, sig = tlv.decode_fields(
            buf, (TAG_SERIAL, TAG_ROLE, TAG_SUBJECT, TAG_ISSUER, TAG_PUBKEY, TAG_ATTRS, TAG_REFS, TAG_SIGNATURE)
        )
        attributes = []
        for tag, entry in tlv.iterate(attrs):
            if tag != _TAG_ATTR:
                raise tlv.UnknownTag(f"attribute entry tag 0x{tag:02x}")
            k, v = tlv.decode_fields(entry, (_TAG_KEY, _TAG_VALUE))
            attributes.append((k.decode(), v.decode()))
        bound = []
        for tag, fp in tlv.iterate(refs):
            if len(fp) != 32:
                raise tlv.DecodeError("binding reference must be a 32-byte fingerprint")
            bound.append((Role.from_code(tag), fp))
        return cls(
            serial=tlv.to_int(serial, 8),
            role=Role.from_code(tlv.to_int(role, 1)),
            subject=subject.decode(),
            issuer_serial=tlv.to_int(issuer, 8),
            public_key=pub,
            attributes=tuple(attributes),
            bound_refs=tuple(bound),
            signature=sig,
        )

    @property
    def self_signed(self) -> bool:
        return self.issuer_serial == self.serial

    def attribute(self, key: str) -> str | None:
        return dict(self.attributes).get(key)

    def ref(self, role: Role) -> bytes | None:
        for r, fp in self.bound_refs:
            if r == role:
                return fp
        return None


def signature_valid(cred: Credential, issuer_public: bytes) -> bool:
    return verify_signature(issuer_public, cred.signature, cred.fingerprint)


def component_attributes(components: Iterable[tuple[str, bool]]) -> tuple[tuple[str, str], ...]:
    """Attribute list describing platform hardware modules and whether each is mutable."""
    out = []
    for n, (name, mutable) in enumerate(components):
        out.append((f"component.{n}.name", name))
        out.append((f"component.{n}.mutable", "true" if mutable else "false"))
    return tuple(out)


def issue(issuer: Credential | None, signer: Signer, template: Credential) -> Credential:
    """Sign ``template`` as ``issuer``; ``issuer=None`` self-signs a root CA."""
    if issuer is None:
        if template.role != Role.ROOT_CA:
            raise RoleViolation(f"only root_ca may self-sign, not {template.role.value}")
        template = dataclasses.replace(template, issuer_serial=template.serial)
    else:
        if template.role not in ISSUANCE.get(issuer.role, ()):
            raise RoleViolation(f"{issuer.role.value} may not issue {template.role.value}")
        template = dataclasses.replace(template, issuer_serial=issuer.serial)
    unsigned = dataclasses.replace(template, signature=b"")
    return dataclasses.replace(unsigned, signature=signer.sign(unsigned.fingerprint))


def new_root(serial: int, subject: str, key: Ed25519PrivateKey) -> Credential:
    template = Credential(serial, Role.ROOT_CA, subject, serial, public_bytes(key.public_key()))
    return issue(None, key, template)


def certify_ak(ek: Credential | None, ek_signer: Signer, ak_public: bytes, serial: int, subject: str = "ak") -> Credential:
    if ek is None or ek.role != Role.EK:
        raise EkMissing("an EK credential is required to certify an AK")
    return issue(ek, ek_signer, Credential(serial, Role.AK, subject, ek.serial, ak_public))


class ChainStatus(str, enum.Enum):
    OK = "ok"
    BAD_SIGNATURE = "bad_signature"
    UNKNOWN_ISSUER = "unknown_issuer"
    ROLE_VIOLATION = "role_violation"


class BindingStatus(str, enum.Enum):
    OK = "ok"
    EK_MISMATCH = "ek_mismatch"
    ATTR_MISMATCH = "attr_mismatch"


@dataclass(frozen=True)
class TrustAnchorSet:
    anchors: tuple[Credential, ...]

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(self.anchors))
        if not self.anchors:
            raise ValueError("trust anchor set must not be empty")
        for a in self.anchors:
            if a.role != Role.ROOT_CA or not a.self_signed:
                raise ValueError(f"anchor {a.subject!r} is not a self-signed root")

    @property
    def fingerprints(self) -> frozenset[bytes]:
        return frozenset(a.fingerprint for a in self.anchors)

    def by_serial(self, serial: int) -> list[Credential]:
        return [a for a in self.anchors if a.serial == serial]

    def without(self, anchor: Credential) -> "TrustAnchorSet":
        return TrustAnchorSet(tuple(a for a in self.anchors if a.fingerprint != anchor.fingerprint))

    @classmethod
    def load_dir(cls, path: Path | str) -> "TrustAnchorSet":
        return cls(tuple(Credential.decode(p.read_bytes()) for p in sorted(Path(path).glob("*.cred"))))


class CredentialStore:
    """Credentials indexed by serial; reads are lock-free, writes serialized."""

    def __init__(self, creds: Iterable[Credential] = ()):
        self._lock = threading.Lock()
        self._by_serial: dict[int, tuple[Credential, ...]] = {}
        for c in creds:
            self.add(c)

    def add(self, cred: Credential) -> None:
        with self._lock:
            existing = self._by_serial.get(cred.serial, ())
            if any(c.encode() == cred.encode() for c in existing):
                return
            self._by_serial = {**self._by_serial, cred.serial: existing + (cred,)}

    def by_serial(self, serial: int) -> tuple[Credential, ...]:
        return self._by_serial.get(serial, ())

    def __iter__(self):
        return (c for group in list(self._by_serial.values()) for c in group)


def validate_chain(leaf: Credential, store: CredentialStore | Iterable[Credential], anchors: TrustAnchorSet) -> ChainStatus:
    """Walk issuer links from ``leaf`` to a trust anchor, checking each signature and role."""
    if not isinstance(store, CredentialStore):
        store = CredentialStore(store)
    trusted = anchors.fingerprints
    cur = leaf
    for _ in range(MAX_DEPTH):
        if cur.fingerprint in trusted:
            return ChainStatus.OK if signature_valid(cur, cur.public_key) else ChainStatus.BAD_SIGNATURE
        if cur.self_signed:
            # a self-signed credential that is not an anchor roots a foreign chain
            return ChainStatus.UNKNOWN_ISSUER
        candidates = list(anchors.by_serial(cur.issuer_serial))
        candidates += [c for c in store.by_serial(cur.issuer_serial) if c.fingerprint not in trusted]
        if not candidates:
            return ChainStatus.UNKNOWN_ISSUER
        verified = [c for c in candidates if signature_valid(cur, c.public_key)]
        if not verified:
            return ChainStatus.BAD_SIGNATURE
        issuer = verified[0]
        if cur.role not in ISSUANCE.get(issuer.role, ()):
            return ChainStatus.ROLE_VIOLATION
        cur = issuer
    return ChainStatus.UNKNOWN_ISSUER


def validate_binding(platform: Credential, attrs: Credential, ek: Credential) -> BindingStatus:
    if platform.ref(Role.EK) != ek.fingerprint:
        return BindingStatus.EK_MISMATCH
    if attrs.ref(Role.PLATFORM) != platform.fingerprint:
        return BindingStatus.ATTR_MISMATCH
    return BindingStatus.OK


@dataclass
class ChainReport:
    chains: dict[str, ChainStatus] = field(default_factory=dict)
    binding: BindingStatus | None = None

    @property
    def ok(self) -> bool:
        return all(s == ChainStatus.OK for s in self.chains.values()) and self.binding in (None, BindingStatus.OK)


def validate_platform(creds: Iterable[Credential], anchors: TrustAnchorSet) -> ChainReport:
    """Chain-check every EK, platform, attributes and AK credential and bind the triple."""
    creds = list(creds)
    store = CredentialStore(creds)
    report = ChainReport()
    by_role: dict[Role, Credential] = {}
    for c in creds:
        if c.role in (Role.EK, Role.PLATFORM, Role.PLATFORM_ATTRIBUTES, Role.AK):
            report.chains[c.role.value] = validate_chain(c, store, anchors)
            by_role[c.role] = c
    for role in (Role.EK, Role.PLATFORM, Role.PLATFORM_ATTRIBUTES, Role.AK):
        if role not in by_role:
            report.chains[role.value] = ChainStatus.UNKNOWN_ISSUER
    if all(r in by_role for r in (Role.EK, Role.PLATFORM, Role.PLATFORM_ATTRIBUTES)):
        report.binding = validate_binding(by_role[Role.PLATFORM], by_role[Role.PLATFORM_ATTRIBUTES], by_role[Role.EK])
    else:
        report.binding = BindingStatus.EK_MISMATCH
    return report


def by_role(creds: Iterable[Credential]) -> dict[Role, Credential]:
    return {c.role: c for c in creds}
