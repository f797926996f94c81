"""Single-fault injection against an honest attestation bundle.

Each injector returns a bundle that differs from the honest one in exactly
one respect, together with the verdict check that must be the only one to
fail.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

from .boot import tamper
from .credentials import Credential, Role, issue, new_root
from .provision import ProverDevice, SupplyChain, derive_key, provision_device
from .tpm import Quote
from .verifier import AttestationBundle


def bad_chain(dev: ProverDevice, chain: SupplyChain, nonce: bytes) -> AttestationBundle:
    """EK credential re-signed by a counterfeit vendor key; its fields are unchanged."""
    bundle = dev.bundle(nonce)
    fake = derive_key(b"counterfeit", "vendor")
    ek = dev.credentials[Role.EK]
    forged = dataclasses.replace(ek, signature=fake.sign(ek.fingerprint))
    bundle.credentials = [forged if c.role == Role.EK else c for c in bundle.credentials]
    return bundle


def broken_binding(dev: ProverDevice, chain: SupplyChain, nonce: bytes) -> AttestationBundle:
    """Platform credential, validly signed, that references another TPM's EK."""
    bundle = dev.bundle(nonce)
    other = provision_device(chain, dev.device_id + "-donor")
    platform = dev.credentials[Role.PLATFORM]
    rebound = issue(chain.platform_root, chain.keys["platform_root"], dataclasses.replace(
        platform, bound_refs=((Role.EK, other.credentials[Role.EK].fingerprint),)))
    bundle.credentials = [rebound if c.role == Role.PLATFORM else c for c in bundle.credentials]
    return bundle


def tampered_firmware(dev: ProverDevice, chain: SupplyChain, nonce: bytes) -> AttestationBundle:
    bundle = dev.bundle(nonce)
    bundle.firmware_log = tamper(dev.firmware_log, len(dev.firmware_log) - 1, "payload")
    return bundle


def tampered_ima(dev: ProverDevice, chain: SupplyChain, nonce: bytes) -> AttestationBundle:
    bundle = dev.bundle(nonce)
    bundle.ima_log = tamper(dev.ima_log, 0, "payload")
    return bundle


def wrong_nonce(dev: ProverDevice, chain: SupplyChain, nonce: bytes) -> AttestationBundle:
    bundle = dev.bundle(nonce)
    bundle.quote = dev.quote(bytes(b ^ 0xFF for b in nonce))
    return bundle


def forged_signature(dev: ProverDevice, chain: SupplyChain, nonce: bytes) -> AttestationBundle:
    bundle = dev.bundle(nonce)
    q = bundle.quote
    sig = bytearray(q.signature)
    sig[0] ^= 0x01
    bundle.quote = Quote(q.body, bytes(sig))
    return bundle


FAULTS: dict[str, tuple[Callable[[ProverDevice, SupplyChain, bytes], AttestationBundle], str]] = {
    "bad_chain": (bad_chain, "cert_chain"),
    "broken_binding": (broken_binding, "binding"),
    "tampered_firmware": (tampered_firmware, "firmware_log"),
    "tampered_ima": (tampered_ima, "ima_log"),
    "wrong_nonce": (wrong_nonce, "nonce_match"),
    "forged_signature": (forged_signature, "quote_signature"),
}


def counterfeit_ek(dev: ProverDevice, nonce: bytes) -> AttestationBundle:
    """EK credential issued by a foreign root that no verifier trusts."""
    root_key, vendor_key = derive_key(b"counterfeit", "root"), derive_key(b"counterfeit", "vendor")
    root = new_root(0xC0FFEE, "Counterfeit Root", root_key)
    vendor = issue(root, root_key, Credential(
        0xC0FFEF, Role.TPM_VENDOR_CA, "Counterfeit Vendor", 0,
        vendor_key.public_key().public_bytes_raw()))
    ek = dev.credentials[Role.EK]
    fake_ek = issue(vendor, vendor_key, dataclasses.replace(ek, signature=b""))
    bundle = dev.bundle(nonce)
    bundle.credentials = [root, vendor] + [fake_ek if c.role == Role.EK else c
                                           for c in bundle.credentials if c.role != Role.TPM_VENDOR_CA]
    return bundle
