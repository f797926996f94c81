"""Simulated supply chain and device provisioning.

A :class:`SupplyChain` holds the root and vendor keys of three parties: the
TPM manufacturer, the platform supplier and the device owner. A
:class:`ProverDevice` is a TPM provisioned under that chain, with its
credentials in NV storage and its boot and IMA logs recorded.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, NoEncryption, PrivateFormat

from .boot import BootImage, ComponentKind, FirmwareComponent, MeasuredFile, boot, ima_measure
from .cel import CelLog
from .credentials import (
    Credential, Role, TrustAnchorSet, certify_ak, component_attributes, issue, new_root,
)
from .tpm import NV_EK_CERT, NV_PLATFORM_CERT, Quote, TpmState, public_bytes, selection_bitmap
from .verifier import AttestationBundle, GoldenTemplate

ATTESTED_PCRS = tuple(range(11))
DEFAULT_SELECTION = selection_bitmap(ATTESTED_PCRS)

_KEY_NAMES = ("tpm_root", "tpm_vendor", "platform_root", "owner_root")


def derive_key(seed: bytes, label: str) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(hashlib.sha256(label.encode() + b"\x00" + seed).digest())


def raw_private(key: Ed25519PrivateKey) -> bytes:
    return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())


def serial_for(*parts: bytes | str) -> int:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode() if isinstance(p, str) else p)
        h.update(b"\x00")
    # top bit clear and never one of the small fixed CA serials
    return (int.from_bytes(h.digest()[:8], "big") >> 1) | 1 << 32


@dataclass
class SupplyChain:
    keys: dict[str, Ed25519PrivateKey]
    tpm_root: Credential
    tpm_vendor: Credential
    platform_root: Credential
    owner_root: Credential

    @classmethod
    def generate(cls, seed: bytes = b"supply-chain") -> "SupplyChain":
        keys = {name: derive_key(seed, name) for name in _KEY_NAMES}
        tpm_root = new_root(1, "TPM Manufacturer Root CA", keys["tpm_root"])
        vendor = issue(tpm_root, keys["tpm_root"], Credential(
            10, Role.TPM_VENDOR_CA, "TPM Vendor EK Issuing CA", 0, public_bytes(keys["tpm_vendor"].public_key())
        ))
        platform_root = new_root(2, "Platform Supplier Root CA", keys["platform_root"])
        owner_root = new_root(3, "Device Owner Root", keys["owner_root"])
        return cls(keys, tpm_root, vendor, platform_root, owner_root)

    @property
    def anchors(self) -> TrustAnchorSet:
        return TrustAnchorSet((self.tpm_root, self.platform_root, self.owner_root))

    def save(self, directory: Path | str) -> None:
        d = Path(directory)
        (d / "anchors").mkdir(parents=True, exist_ok=True)
        (d / "keys").mkdir(parents=True, exist_ok=True)
        for name, key in self.keys.items():
            (d / "keys" / f"{name}.key").write_bytes(raw_private(key))
        for name in ("tpm_root", "platform_root", "owner_root"):
            (d / "anchors" / f"{name}.cred").write_bytes(getattr(self, name).encode())
        (d / "tpm_vendor.cred").write_bytes(self.tpm_vendor.encode())

    @classmethod
    def load(cls, directory: Path | str) -> "SupplyChain":
        d = Path(directory)
        keys = {
            name: Ed25519PrivateKey.from_private_bytes((d / "keys" / f"{name}.key").read_bytes())
            for name in _KEY_NAMES
        }
        creds = {
            name: Credential.decode((d / "anchors" / f"{name}.cred").read_bytes())
            for name in ("tpm_root", "platform_root", "owner_root")
        }
        vendor = Credential.decode((d / "tpm_vendor.cred").read_bytes())
        return cls(keys, creds["tpm_root"], vendor, creds["platform_root"], creds["owner_root"])


DEFAULT_COMPONENTS = (("cpu", False), ("dram", True), ("nic", True), ("tpm", False))


@dataclass
class ProverDevice:
    device_id: str
    tpm: TpmState
    credentials: dict[Role, Credential]
    tpm_vendor: Credential
    firmware_log: CelLog = field(default_factory=CelLog)
    ima_log: CelLog = field(default_factory=CelLog)
    device_info: dict[str, str] = field(default_factory=dict)

    def credential_list(self) -> list[Credential]:
        return [self.tpm_vendor, *self.credentials.values()]

    def golden(self) -> GoldenTemplate:
        return GoldenTemplate.enroll(
            self.device_id, self.credentials.values(), self.firmware_log, self.ima_log, self.device_info
        )

    def quote(self, nonce: bytes, selection: bytes = DEFAULT_SELECTION) -> Quote:
        return self.tpm.quote(nonce, selection)

    def bundle(self, nonce: bytes, selection: bytes = DEFAULT_SELECTION) -> AttestationBundle:
        nv = {}
        for index in (NV_EK_CERT, NV_PLATFORM_CERT):
            if index in self.tpm.nv:
                nv[index] = self.tpm.nv_read(index)
        return AttestationBundle(
            credentials=self.credential_list(),
            nv_certs=nv,
            firmware_log=self.firmware_log,
            ima_log=self.ima_log,
            quote=self.quote(nonce, selection),
        )

    def boot(self, image: BootImage, files: Sequence[MeasuredFile] = ()) -> None:
        """Power-cycle, then run the boot chain and IMA measurement."""
        self.tpm.reboot()
        self.firmware_log = boot(image, self.tpm)
        self.ima_log = ima_measure(list(files), self.tpm)


def provision_device(chain: SupplyChain, device_id: str, seed: bytes | None = None,
                     components: Iterable[tuple[str, bool]] = DEFAULT_COMPONENTS,
                     owner_id: bytes = b"owner") -> ProverDevice:
    """Manufacture, certify and take ownership of a device under ``chain``."""
    seed = device_id.encode() if seed is None else seed
    tpm = TpmState()
    ek_pub = tpm.create_ek(seed)
    ek = issue(chain.tpm_vendor, chain.keys["tpm_vendor"], Credential(
        serial_for("ek", seed), Role.EK, f"EK {device_id}", 0, ek_pub
    ))
    platform = issue(chain.platform_root, chain.keys["platform_root"], Credential(
        serial_for("platform", seed), Role.PLATFORM, f"Platform {device_id}", 0,
        public_bytes(derive_key(seed, "platform").public_key()),
        attributes=(("model", "sim-device"), ("serial_number", device_id)),
        bound_refs=((Role.EK, ek.fingerprint),),
    ))
    attrs = issue(chain.owner_root, chain.keys["owner_root"], Credential(
        serial_for("attrs", seed), Role.PLATFORM_ATTRIBUTES, f"Platform attributes {device_id}", 0,
        b"", attributes=component_attributes(components),
        bound_refs=((Role.PLATFORM, platform.fingerprint),),
    ))
    ak_pub = tpm.create_ak()
    ak = certify_ak(ek, tpm.ek_signer(), ak_pub, serial_for("ak", seed), f"AK {device_id}")
    tpm.nv_write(NV_EK_CERT, ek.encode())
    tpm.nv_write(NV_PLATFORM_CERT, platform.encode())
    tpm.take_ownership(owner_id)
    creds = {Role.EK: ek, Role.PLATFORM: platform, Role.PLATFORM_ATTRIBUTES: attrs, Role.AK: ak}
    info = {"bios": "sim-bios-1.0", "os": "sim-linux-6.1"}
    return ProverDevice(device_id, tpm, creds, chain.tpm_vendor, device_info=info)


def sample_image(n_components: int = 4, salt: bytes = b"") -> BootImage:
    """A valid boot image: S-RTM, firmware volumes, then bootloader (PCR 8) and OS (PCR 9)."""
    if n_components < 1:
        raise ValueError("need at least the S-RTM")
    comps = [FirmwareComponent("S-RTM", b"srtm code" + salt, 0, ComponentKind.SRTM)]
    tail = []
    if n_components >= 3:
        tail = [
            FirmwareComponent("shimx64", b"shim code" + salt, 8, ComponentKind.BOOTLOADER),
            FirmwareComponent("vmlinuz", b"kernel code" + salt, 9, ComponentKind.OS),
        ]
    for i in range(n_components - 1 - len(tail)):
        comps.append(FirmwareComponent(f"FW-C{i + 1}", b"fw code %d" % i + salt, i % 8, ComponentKind.FIRMWARE))
    return BootImage(tuple(comps + tail))


def sample_files(n: int = 3, salt: bytes = b"") -> list[MeasuredFile]:
    return [MeasuredFile(f"/usr/bin/tool{i}", b"binary %d " % i + salt) for i in range(n)]


def honest_device(chain: SupplyChain, device_id: str = "device-1", n_components: int = 4,
                  n_files: int = 3) -> ProverDevice:
    dev = provision_device(chain, device_id)
    dev.boot(sample_image(n_components), sample_files(n_files))
    return dev


def with_credential(dev: ProverDevice, cred: Credential) -> ProverDevice:
    """Copy of ``dev`` presenting ``cred`` in place of its credential of the same role."""
    return dataclasses.replace(dev, credentials={**dev.credentials, cred.role: cred})
