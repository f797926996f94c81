"""In-process TPM 2.0 model: PCR banks, NV storage, EK/AK keys and quotes."""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import tlv
from .cel import NUM_PCRS, Digest, HashAlg

QUOTE_MAGIC = 0xFF544347
MAX_NONCE = 64
NV_MAX = 8 * 1024

# NV layout used by provisioning
NV_EK_CERT = 0x01
NV_OWNER = 0x02
NV_PLATFORM_CERT = 0x03

TAG_MAGIC = 0x10
TAG_QUALIFYING = 0x11
TAG_SELECTION = 0x12
TAG_PCR_DIGEST = 0x13
TAG_SIGNATURE = 0x14
TAG_BODY = 0x15


class TpmError(Exception):
    pass


class BankMismatch(TpmError):
    pass


class IndexOutOfRange(TpmError):
    pass


class NoAttestationKey(TpmError):
    pass


class EkMissing(TpmError):
    pass


class NvIndexAbsent(TpmError, KeyError):
    pass


class NvTooLarge(TpmError):
    pass


def public_bytes(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def selection_bitmap(indices: Iterable[int]) -> bytes:
    """Bit i of byte i // 8 marks PCR i."""
    bits = bytearray(3)
    for i in indices:
        if not 0 <= i < NUM_PCRS:
            raise IndexOutOfRange(f"PCR {i}")
        bits[i // 8] |= 1 << (i % 8)
    return bytes(bits)


def selected_indices(bitmap: bytes) -> list[int]:
    return [i for i in range(NUM_PCRS) if bitmap[i // 8] >> (i % 8) & 1]


def pcr_composite(values, bitmap: bytes) -> bytes:
    return hashlib.sha256(b"".join(values[i] for i in selected_indices(bitmap))).digest()


@dataclass(frozen=True)
class QuoteBody:
    qualifying_data: bytes
    pcr_selection: bytes
    pcr_digest: bytes
    magic: int = QUOTE_MAGIC

    def encode(self) -> bytes:
        return b"".join((
            tlv.pack(TAG_MAGIC, tlv.u32(self.magic)),
            tlv.pack(TAG_QUALIFYING, self.qualifying_data),
            tlv.pack(TAG_SELECTION, self.pcr_selection),
            tlv.pack(TAG_PCR_DIGEST, self.pcr_digest),
        ))

    @classmethod
    def decode(cls, buf: bytes) -> "QuoteBody":
        magic, nonce, sel, digest = tlv.decode_fields(
            buf, (TAG_MAGIC, TAG_QUALIFYING, TAG_SELECTION, TAG_PCR_DIGEST)
        )
        if len(sel) != 3 or len(digest) != 32 or len(nonce) > MAX_NONCE:
            raise tlv.DecodeError("malformed quote body")
        return cls(nonce, sel, digest, tlv.to_int(magic, 4))

    def message_digest(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()


@dataclass(frozen=True)
class Quote:
    body: QuoteBody
    signature: bytes

    def encode(self) -> bytes:
        return tlv.pack(TAG_BODY, self.body.encode()) + tlv.pack(TAG_SIGNATURE, self.signature)

    @classmethod
    def decode(cls, buf: bytes) -> "Quote":
        body, sig = tlv.decode_fields(buf, (TAG_BODY, TAG_SIGNATURE))
        return cls(QuoteBody.decode(body), sig)


class _KeySigner:
    """Signs on behalf of a key without handing out the key."""

    def __init__(self, key: Ed25519PrivateKey):
        self.__key = key

    def sign(self, message: bytes) -> bytes:
        return self.__key.sign(message)

    @property
    def public_key(self) -> bytes:
        return public_bytes(self.__key.public_key())


class TpmState:
    """A simulated TPM.

    Mutating calls are serialized with an internal lock; reads of public keys
    are safe from any thread.
    """

    BANKS = (HashAlg.SHA1, HashAlg.SHA256)

    def __init__(self):
        self._lock = threading.RLock()
        self._ek: Ed25519PrivateKey | None = None
        self._ek_seed: bytes | None = None
        self._ak: Ed25519PrivateKey | None = None
        self.nv: dict[int, bytes] = {}
        self._reset_banks()

    def _reset_banks(self):
        self.banks = {alg: [bytes(alg.digest_len)] * NUM_PCRS for alg in self.BANKS}

    def read_pcr(self, bank: HashAlg, index: int) -> bytes:
        if not 0 <= index < NUM_PCRS:
            raise IndexOutOfRange(f"PCR {index}")
        return self.banks[bank][index]

    def pcr_values(self, bank: HashAlg = HashAlg.SHA256) -> list[bytes]:
        return list(self.banks[bank])

    def at_reset(self) -> bool:
        return all(v == bytes(len(v)) for bank in self.banks.values() for v in bank)

    def pcr_extend(self, bank: HashAlg, index: int, digest: Digest) -> bytes:
        if digest.alg != bank:
            raise BankMismatch(f"{HashAlg(digest.alg).name} digest into {bank.name} bank")
        if not 0 <= index < NUM_PCRS:
            raise IndexOutOfRange(f"PCR {index}")
        with self._lock:
            slot = self.banks[bank]
            slot[index] = bank.hash(slot[index] + digest.value)
            return slot[index]

    def quote(self, nonce: bytes, selection: bytes) -> Quote:
        if len(nonce) > MAX_NONCE:
            raise ValueError(f"nonce longer than {MAX_NONCE} bytes")
        if len(selection) != 3:
            raise ValueError("selection bitmap must be 3 bytes")
        with self._lock:
            if self._ak is None:
                raise NoAttestationKey("no attestation key loaded")
            body = QuoteBody(bytes(nonce), bytes(selection), pcr_composite(self.banks[HashAlg.SHA256], selection))
            return Quote(body, self._ak.sign(body.message_digest()))

    def nv_write(self, index: int, data: bytes) -> None:
        if len(data) > NV_MAX:
            raise NvTooLarge(f"{len(data)} bytes > {NV_MAX}")
        if not 0 <= index < 1 << 32:
            raise IndexOutOfRange(f"NV index {index}")
        with self._lock:
            self.nv[index] = bytes(data)

    def nv_read(self, index: int) -> bytes:
        try:
            return self.nv[index]
        except KeyError:
            raise NvIndexAbsent(f"NV index 0x{index:x} not defined") from None

    def take_ownership(self, owner_id: bytes) -> None:
        self.nv_write(NV_OWNER, owner_id)

    def create_ek(self, seed: bytes) -> bytes:
        with self._lock:
            self._ek_seed = bytes(seed)
            self._ek = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"EK\x00" + seed).digest())
            self._ak = None
            return public_bytes(self._ek.public_key())

    def create_ak(self) -> bytes:
        with self._lock:
            if self._ek_seed is None:
                raise EkMissing("create_ek must run before create_ak")
            # AK is derived under the EK so it is stable for a given device
            self._ak = Ed25519PrivateKey.from_private_bytes(
                hashlib.sha256(b"AK\x00" + self._ek_seed).digest()
            )
            return public_bytes(self._ak.public_key())

    @property
    def ek_public(self) -> bytes:
        if self._ek is None:
            raise EkMissing("no endorsement key")
        return public_bytes(self._ek.public_key())

    @property
    def ak_public(self) -> bytes:
        if self._ak is None:
            raise NoAttestationKey("no attestation key loaded")
        return public_bytes(self._ak.public_key())

    def ek_signer(self) -> _KeySigner:
        if self._ek is None:
            raise EkMissing("no endorsement key")
        return _KeySigner(self._ek)

    def reboot(self) -> None:
        with self._lock:
            self._reset_banks()

    def factory_reset(self) -> None:
        with self._lock:
            self._reset_banks()
            self.nv = {}
            self._ek = self._ak = None
            self._ek_seed = None
