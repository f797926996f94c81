"""Provisioning pre-authentication: counter challenges answered with HOTP codes.

The verifier keeps at most ``capacity`` outstanding challenges, one per
device, so unauthenticated peers cannot grow its state.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable

DIGITS = 8
MIN_KEY_LEN = 16
DEFAULT_TTL = 10.0
DEFAULT_CAPACITY = 1024


class TableFull(Exception):
    """The pending table has no room; the request is refused, not queued."""


class WeakKey(ValueError):
    pass


def check_key(key: bytes) -> bytes:
    if len(key) < MIN_KEY_LEN:
        raise WeakKey(f"pre-shared key must be at least {MIN_KEY_LEN} bytes, got {len(key)}")
    return bytes(key)


def hotp(key: bytes, counter: int, digits: int = DIGITS) -> str:
    mac = hmac.new(key, struct.pack(">Q", counter), hashlib.sha1).digest()
    offset = mac[-1] & 0x0F
    word = struct.unpack_from(">I", mac, offset)[0] & 0x7FFFFFFF
    return str(word % 10 ** digits).zfill(digits)


@dataclass(frozen=True)
class Challenge:
    device_id: str
    counter: int
    issued_at: float
    ttl: float

    def expired(self, now: float) -> bool:
        return now - self.issued_at > self.ttl


class RejectReason(str, enum.Enum):
    NO_CHALLENGE = "no_challenge"
    EXPIRED = "expired"
    COUNTER_MISMATCH = "counter_mismatch"
    BAD_CODE = "bad_code"


@dataclass(frozen=True)
class AuthResult:
    accepted: bool
    reason: RejectReason | None = None

    def __bool__(self):
        return self.accepted


class PendingTable:
    """Outstanding challenges keyed by device id.

    Counters come from one global sequence, so they increase per device as
    well. The sequence starts at ``floor``; the default floor is the wall
    clock in microseconds so a restarted verifier never reissues a counter
    an eavesdropper may have seen.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, ttl: float = DEFAULT_TTL,
                 clock: Callable[[], float] = time.monotonic, floor: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.ttl = ttl
        self.clock = clock
        self._next = time.time_ns() // 1000 if floor is None else floor
        self._entries: dict[str, Challenge] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def get(self, device_id: str) -> Challenge | None:
        return self._entries.get(device_id)

    def _evict_expired(self, now: float) -> None:
        for dev in [d for d, c in self._entries.items() if c.expired(now)]:
            del self._entries[dev]

    def issue_challenge(self, device_id: str) -> Challenge:
        with self._lock:
            now = self.clock()
            if device_id not in self._entries and len(self._entries) >= self.capacity:
                self._evict_expired(now)
                if len(self._entries) >= self.capacity:
                    raise TableFull(f"{len(self._entries)} challenges outstanding")
            ch = Challenge(device_id, self._next, now, self.ttl)
            self._next += 1
            self._entries[device_id] = ch
            return ch

    def verify_auth(self, device_id: str, counter: int, code: str, key: bytes) -> AuthResult:
        with self._lock:
            ch = self._entries.get(device_id)
            if ch is None:
                return AuthResult(False, RejectReason.NO_CHALLENGE)
            if ch.expired(self.clock()):
                return AuthResult(False, RejectReason.EXPIRED)
            if ch.counter != counter:
                return AuthResult(False, RejectReason.COUNTER_MISMATCH)
            expected = hotp(key, counter).encode()
            if not hmac.compare_digest(expected, code.encode() if isinstance(code, str) else bytes(code)):
                return AuthResult(False, RejectReason.BAD_CODE)
            del self._entries[device_id]
            return AuthResult(True)

    def discard(self, device_id: str, counter: int) -> None:
        """Drop a challenge if it is still the one with ``counter`` (used when its session ends)."""
        with self._lock:
            ch = self._entries.get(device_id)
            if ch is not None and ch.counter == counter:
                del self._entries[device_id]
