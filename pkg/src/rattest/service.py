"""Networked verifier service, prover agent, wire framing and the enrollment store.

Frames are ``[length u32][msg_type u8][payload]`` where ``length`` counts the
type byte plus payload. Payloads are TLV maps with message-local tags.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import secrets
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from . import tlv
from .boot import tamper as tamper_log
from .cel import CelLog, LogSource, decode_log, encode_log, validate_log_for_source
from .credentials import BindingStatus, ChainStatus, Credential, TrustAnchorSet, validate_platform
from .provision import DEFAULT_SELECTION, ProverDevice
from .spa import DEFAULT_CAPACITY, DEFAULT_TTL, PendingTable, TableFull, hotp
from .tpm import MAX_NONCE, TpmError
from .verifier import (
    AttestationBundle, AttestationVerdict, GoldenTemplate, attest, decode_kv, encode_kv,
)

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
NONCE_LEN = 32


class MsgType(enum.IntEnum):
    HELLO = 0x01
    CHALLENGE = 0x02
    HOTP_AUTH = 0x03
    ACK = 0x04
    NACK = 0x05
    DEVICE_INFO = 0x06
    ATTEST_REQUEST = 0x07
    ATTEST_RESPONSE = 0x08
    VERDICT = 0x09


class FrameError(tlv.DecodeError):
    pass


class ProtocolError(Exception):
    """The peer sent something out of sequence or refused the exchange."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    length = 1 + len(payload)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return tlv.u32(length) + tlv.u8(msg_type) + payload


class FrameDecoder:
    """Incremental frame parser; buffers at most one frame header plus ``MAX_FRAME`` bytes."""

    def __init__(self):
        self._buf = bytearray()
        self._consumed = 0

    def feed(self, data: bytes) -> list[tuple[MsgType, bytes]]:
        self._buf += data
        frames = []
        while len(self._buf) >= 4:
            length = int.from_bytes(self._buf[:4], "big")
            if length == 0 or length > MAX_FRAME:
                raise FrameError(f"bad frame length {length}", self._consumed)
            if len(self._buf) < 4 + length:
                break
            try:
                mtype = MsgType(self._buf[4])
            except ValueError:
                raise FrameError(f"unknown message type 0x{self._buf[4]:02x}", self._consumed + 4) from None
            frames.append((mtype, bytes(self._buf[5:4 + length])))
            del self._buf[:4 + length]
            self._consumed += 4 + length
        return frames

    @property
    def buffered(self) -> int:
        return len(self._buf)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 65536))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[MsgType, bytes]:
    length = int.from_bytes(_recv_exact(sock, 4), "big")
    if length == 0 or length > MAX_FRAME:
        raise FrameError(f"bad frame length {length}")
    body = _recv_exact(sock, length)
    try:
        return MsgType(body[0]), body[1:]
    except ValueError:
        raise FrameError(f"unknown message type 0x{body[0]:02x}") from None


def send_frame(sock: socket.socket, msg_type: int, payload: bytes = b"") -> None:
    sock.sendall(encode_frame(msg_type, payload))


# message payloads

def _seq(items) -> bytes:
    return b"".join(tlv.pack(0x01, x) for x in items)


def _unseq(buf: bytes) -> list[bytes]:
    return [v for _, v in tlv.iterate(buf)]


def hello_payload(device_id: str) -> bytes:
    return tlv.pack(0x01, device_id.encode())


def challenge_payload(counter: int) -> bytes:
    return tlv.pack(0x01, tlv.u64(counter))


def auth_payload(device_id: str, counter: int, code: str) -> bytes:
    return tlv.pack(0x01, device_id.encode()) + tlv.pack(0x02, tlv.u64(counter)) + tlv.pack(0x03, code.encode())


def nack_payload(reason: str) -> bytes:
    return tlv.pack(0x01, reason.encode())


def ack_payload(enrolled: bool | None = None) -> bytes:
    return b"" if enrolled is None else tlv.pack(0x01, tlv.u8(int(enrolled)))


def device_info_payload(device_id: str, info: Mapping[str, str], credentials, firmware_log: bytes, ima_log: bytes) -> bytes:
    return b"".join((
        tlv.pack(0x01, device_id.encode()),
        tlv.pack(0x02, encode_kv(info)),
        tlv.pack(0x03, _seq(c.encode() if isinstance(c, Credential) else c for c in credentials)),
        tlv.pack(0x04, firmware_log),
        tlv.pack(0x05, ima_log),
    ))


def attest_request_payload(nonce: bytes, selection: bytes) -> bytes:
    return tlv.pack(0x01, nonce) + tlv.pack(0x02, selection)


def attest_response_payload(bundle: AttestationBundle) -> bytes:
    creds = _seq(c.encode() if isinstance(c, Credential) else c for c in bundle.credentials)
    nv = _seq(tlv.u32(i) + data for i, data in sorted(bundle.nv_certs.items()))
    fw = bundle.firmware_log if isinstance(bundle.firmware_log, bytes) else encode_log(bundle.firmware_log)
    ima = bundle.ima_log if isinstance(bundle.ima_log, bytes) else encode_log(bundle.ima_log)
    quote = bundle.quote if isinstance(bundle.quote, bytes) else bundle.quote.encode()
    return b"".join((tlv.pack(0x01, creds), tlv.pack(0x02, nv), tlv.pack(0x03, fw),
                     tlv.pack(0x04, ima), tlv.pack(0x05, quote)))


def parse_attest_response(payload: bytes) -> AttestationBundle:
    """Split the response into raw parts; decoding of logs and quote is left to the verifier."""
    fields = tlv.decode_map(payload, required=(0x01, 0x02, 0x03, 0x04, 0x05))
    nv = {}
    for entry in _unseq(fields[0x02]):
        if len(entry) < 4:
            raise tlv.DecodeError("NV entry lacks an index")
        nv[int.from_bytes(entry[:4], "big")] = entry[4:]
    return AttestationBundle(
        credentials=_unseq(fields[0x01]), nv_certs=nv,
        firmware_log=fields[0x03], ima_log=fields[0x04], quote=fields[0x05],
    )


def _field_str(fields, tag) -> str:
    return fields[tag].decode()


# enrollment store

TAG_TEMPLATE = 0x40
TAG_INDEX = 0x41


class StoreCorrupt(Exception):
    pass


class EnrollmentStore:
    """Append-only file of golden templates with a trailing offset index.

    Every commit rewrites the file to a temporary sibling, fsyncs it and
    renames it over the original, so a crash mid-write leaves the previous
    contents intact.
    """

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records = b""
        self._offsets: list[int] = []
        self._templates: dict[str, GoldenTemplate] = {}
        if self.path.exists():
            self._load(self.path.read_bytes())

    def _load(self, data: bytes) -> None:
        offset = 0
        offsets = []
        templates = {}
        index = None
        try:
            while offset < len(data):
                if index is not None:
                    raise StoreCorrupt("data after index")
                tag, value, nxt = tlv.read(data, offset)
                if tag == TAG_TEMPLATE:
                    offsets.append(offset)
                    t = GoldenTemplate.decode(value)
                    templates[t.device_id] = t
                elif tag == TAG_INDEX:
                    index = [int.from_bytes(value[i:i + 8], "big") for i in range(0, len(value), 8)]
                    records_end = offset
                else:
                    raise StoreCorrupt(f"unknown tag 0x{tag:02x}")
                offset = nxt
        except tlv.DecodeError as exc:
            raise StoreCorrupt(str(exc)) from exc
        if offsets and index != offsets:
            raise StoreCorrupt("tail index does not match records")
        self._records = data[:records_end] if offsets else b""
        self._offsets = offsets
        self._templates = templates

    def get(self, device_id: str) -> GoldenTemplate | None:
        return self._templates.get(device_id)

    def __contains__(self, device_id: str) -> bool:
        return device_id in self._templates

    def __len__(self):
        return len(self._templates)

    def put(self, template: GoldenTemplate) -> None:
        with self._lock:
            entry = tlv.pack(TAG_TEMPLATE, template.encode())
            records = self._records + entry
            offsets = self._offsets + [len(self._records)]
            data = records + tlv.pack(TAG_INDEX, b"".join(tlv.u64(o) for o in offsets))
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_name(self.path.name + ".tmp")
            with open(tmp, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, self.path)
            self._records, self._offsets = records, offsets
            self._templates = {**self._templates, template.device_id: template}


# verifier service

@dataclass
class VerifierConfig:
    anchors: TrustAnchorSet
    psk: bytes | Mapping[str, bytes]
    store: EnrollmentStore
    challenge_ttl: float = DEFAULT_TTL
    pending_capacity: int = DEFAULT_CAPACITY
    read_timeout: float = 10.0
    selection: bytes = DEFAULT_SELECTION


class VerifierService:
    def __init__(self, config: VerifierConfig, clock: Callable[[], float] | None = None):
        self.config = config
        self.pending = PendingTable(config.pending_capacity, config.challenge_ttl,
                                    **({"clock": clock} if clock else {}))
        self.issued_nonces: set[bytes] = set()
        self._nonce_lock = threading.Lock()
        self.verdicts: list[tuple[str, AttestationVerdict]] = []
        self._server: socketserver.ThreadingTCPServer | None = None
        self._thread: threading.Thread | None = None

    def key_for(self, device_id: str) -> bytes | None:
        psk = self.config.psk
        return psk if isinstance(psk, (bytes, bytearray)) else psk.get(device_id)

    def fresh_nonce(self) -> bytes:
        with self._nonce_lock:
            while True:
                nonce = secrets.token_bytes(NONCE_LEN)
                if nonce not in self.issued_nonces:
                    self.issued_nonces.add(nonce)
                    return nonce

    # session handling

    def handle_session(self, sock: socket.socket, peer="?") -> None:
        sock.settimeout(self.config.read_timeout)
        session = _Session(self, sock, peer)
        try:
            session.run()
        except ProtocolError as exc:
            log.info("session %s: closed (%s)", peer, exc.reason)
        except FrameError as exc:
            log.info("session %s: framing error: %s", peer, exc)
            _try_send(sock, MsgType.NACK, nack_payload("frame"))
        except (ConnectionError, socket.timeout, OSError) as exc:
            log.info("session %s: transport ended: %s", peer, exc)
        finally:
            session.release()

    def enroll(self, payload: bytes) -> tuple[str, GoldenTemplate | str]:
        """Validate a DEVICE_INFO payload; returns ``(device_id, template)`` or ``(device_id, nack_reason)``."""
        try:
            fields = tlv.decode_map(payload, required=(0x01, 0x02, 0x03, 0x04, 0x05))
            device_id = _field_str(fields, 0x01)
            info = decode_kv(fields[0x02])
            creds = [Credential.decode(c) for c in _unseq(fields[0x03])]
            fw = decode_log(fields[0x04])
            ima = decode_log(fields[0x05])
        except (tlv.DecodeError, ValueError, UnicodeDecodeError):
            return "", "malformed"
        report = validate_platform(creds, self.config.anchors)
        if any(s != ChainStatus.OK for s in report.chains.values()):
            return device_id, "chain"
        if report.binding != BindingStatus.OK:
            return device_id, "binding"
        if not (validate_log_for_source(fw, LogSource.FIRMWARE).ok and validate_log_for_source(ima, LogSource.IMA).ok):
            return device_id, "logs"
        try:
            template = GoldenTemplate.enroll(device_id, creds, fw, ima, info)
        except ValueError:
            return device_id, "chain"
        return device_id, template

    # server lifecycle

    def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        service = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                service.handle_session(self.request, self.client_address)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True
            request_queue_size = 128

        self._server = Server((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self._server.server_address[:2]

    def wait(self) -> None:
        """Block until the server thread exits; short joins keep signals deliverable."""
        while self._thread is not None and self._thread.is_alive():
            self._thread.join(0.5)

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None


def _try_send(sock, mtype, payload=b""):
    try:
        send_frame(sock, mtype, payload)
    except OSError:
        pass


class _Session:
    def __init__(self, service: VerifierService, sock: socket.socket, peer):
        self.service = service
        self.sock = sock
        self.peer = peer
        self.challenge = None

    def release(self):
        # challenges are tied to the session that requested them
        if self.challenge is not None:
            self.service.pending.discard(self.challenge.device_id, self.challenge.counter)
            self.challenge = None

    def refuse(self, reason: str):
        _try_send(self.sock, MsgType.NACK, nack_payload(reason))
        raise ProtocolError(reason)

    def authenticate(self) -> str:
        pending = self.service.pending
        while True:
            mtype, payload = read_frame(self.sock)
            if mtype == MsgType.HELLO:
                try:
                    device_id = _field_str(tlv.decode_map(payload, required=(0x01,)), 0x01)
                except (tlv.DecodeError, UnicodeDecodeError):
                    self.refuse("malformed")
                self.release()
                try:
                    self.challenge = pending.issue_challenge(device_id)
                except TableFull:
                    self.refuse("busy")
                send_frame(self.sock, MsgType.CHALLENGE, challenge_payload(self.challenge.counter))
            elif mtype == MsgType.HOTP_AUTH:
                try:
                    f = tlv.decode_map(payload, required=(0x01, 0x02, 0x03))
                    device_id = _field_str(f, 0x01)
                    counter = tlv.to_int(f[0x02], 8)
                    code = _field_str(f, 0x03)
                except (tlv.DecodeError, UnicodeDecodeError):
                    self.refuse("malformed")
                key = self.service.key_for(device_id)
                if key is None:
                    self.refuse("auth")
                result = pending.verify_auth(device_id, counter, code, key)
                if not result:
                    log.info("session %s: auth rejected for %s: %s", self.peer, device_id, result.reason.value)
                    self.refuse("auth")
                self.challenge = None
                return device_id
            else:
                self.refuse("auth")

    def run(self):
        service = self.service
        store = service.config.store
        device_id = self.authenticate()
        enrolled = device_id in store
        send_frame(self.sock, MsgType.ACK, ack_payload(enrolled))

        if not enrolled:
            mtype, payload = read_frame(self.sock)
            if mtype != MsgType.DEVICE_INFO:
                self.refuse("sequence")
            claimed, result = service.enroll(payload)
            if isinstance(result, str):
                self.refuse(result)
            if claimed != device_id:
                self.refuse("auth")
            try:
                store.put(result)
            except OSError:
                self.refuse("storage")
            log.info("session %s: enrolled %s", self.peer, device_id)
            send_frame(self.sock, MsgType.ACK, ack_payload())

        verdict = self.attest(device_id)
        service.verdicts.append((device_id, verdict))
        log.info("session %s: device %s verdict %s failed=%s", self.peer, device_id,
                 "pass" if verdict.overall else "fail", ",".join(verdict.failed()) or "-")
        send_frame(self.sock, MsgType.VERDICT, tlv.pack(0x01, json.dumps(verdict.to_dict()).encode()))

    def attest(self, device_id: str) -> AttestationVerdict:
        service = self.service
        golden = service.config.store.get(device_id)
        nonce = service.fresh_nonce()
        send_frame(self.sock, MsgType.ATTEST_REQUEST, attest_request_payload(nonce, service.config.selection))
        mtype, payload = read_frame(self.sock)
        if mtype == MsgType.NACK:
            raise ProtocolError("prover refused attestation: " + _nack_reason(payload))
        if mtype != MsgType.ATTEST_RESPONSE:
            self.refuse("sequence")
        try:
            bundle = parse_attest_response(payload)
        except tlv.DecodeError:
            self.refuse("malformed")
        return attest(bundle, golden, nonce, service.config.anchors)


def _nack_reason(payload: bytes) -> str:
    try:
        return tlv.decode_map(payload, required=(0x01,))[0x01].decode()
    except (tlv.DecodeError, UnicodeDecodeError):
        return "?"


# prover agent

@dataclass
class SessionResult:
    enrolled_now: bool = False
    verdict: AttestationVerdict | None = None
    nack: str | None = None
    frames_sent: list[bytes] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.verdict is not None and self.verdict.overall


class ProverAgent:
    """Runs one provisioning/attestation session for a :class:`ProverDevice`.

    ``tamper`` is ``(source, recnum)``; it flips one payload byte of that
    record in the attestation response only, leaving enrollment honest.
    """

    def __init__(self, device: ProverDevice, psk: bytes, tamper: tuple[str, int] | None = None,
                 timeout: float = 10.0):
        self.device = device
        self.psk = psk
        self.tamper = tamper
        self.timeout = timeout

    def _send(self, sock, result, mtype, payload=b""):
        frame = encode_frame(mtype, payload)
        result.frames_sent.append(frame)
        sock.sendall(frame)

    def _expect(self, sock, *types) -> bytes:
        mtype, payload = read_frame(sock)
        if mtype == MsgType.NACK:
            raise ProtocolError(_nack_reason(payload))
        if mtype not in types:
            raise ProtocolError(f"unexpected {mtype.name}")
        return payload

    def build_response(self, nonce: bytes, selection: bytes) -> bytes:
        bundle = self.device.bundle(nonce, selection)
        if self.tamper:
            source, recnum = self.tamper
            if LogSource(source) is LogSource.FIRMWARE:
                bundle.firmware_log = tamper_log(bundle.firmware_log, recnum)
            else:
                bundle.ima_log = tamper_log(bundle.ima_log, recnum)
        return attest_response_payload(bundle)

    def run(self, host: str, port: int) -> SessionResult:
        result = SessionResult()
        dev = self.device
        with socket.create_connection((host, port), timeout=self.timeout) as sock:
            sock.settimeout(self.timeout)
            try:
                self._send(sock, result, MsgType.HELLO, hello_payload(dev.device_id))
                counter = tlv.to_int(tlv.decode_map(self._expect(sock, MsgType.CHALLENGE), required=(0x01,))[0x01], 8)
                self._send(sock, result, MsgType.HOTP_AUTH, auth_payload(dev.device_id, counter, hotp(self.psk, counter)))
                ack = tlv.decode_map(self._expect(sock, MsgType.ACK))
                if ack.get(0x01) == b"\x00":
                    self._send(sock, result, MsgType.DEVICE_INFO, device_info_payload(
                        dev.device_id, dev.device_info, dev.credential_list(),
                        encode_log(dev.firmware_log), encode_log(dev.ima_log),
                    ))
                    self._expect(sock, MsgType.ACK)
                    result.enrolled_now = True
                req = tlv.decode_map(self._expect(sock, MsgType.ATTEST_REQUEST), required=(0x01, 0x02))
                nonce, selection = req[0x01], req[0x02]
                if len(nonce) > MAX_NONCE or len(selection) != 3:
                    raise ProtocolError("malformed attestation request")
                try:
                    response = self.build_response(nonce, selection)
                except TpmError as exc:
                    self._send(sock, result, MsgType.NACK, nack_payload(f"tpm: {exc}"))
                    result.nack = f"tpm: {exc}"
                    return result
                self._send(sock, result, MsgType.ATTEST_RESPONSE, response)
                report = tlv.decode_map(self._expect(sock, MsgType.VERDICT), required=(0x01,))[0x01]
                result.verdict = AttestationVerdict.from_dict(json.loads(report))
            except ProtocolError as exc:
                result.nack = exc.reason
        return result
