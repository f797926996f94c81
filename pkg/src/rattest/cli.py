"""Command line entry points.

Exit codes: 0 attestation passed (or command succeeded), 1 attestation
verdict failed, 2 protocol, I/O or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from pathlib import Path

from . import cel
from .boot import InvalidImage, boot, collect_files, ima_measure, parse_manifest
from .credentials import Credential, TrustAnchorSet
from .provision import SupplyChain, provision_device
from .service import EnrollmentStore, ProverAgent, StoreCorrupt, VerifierConfig, VerifierService
from .spa import DEFAULT_CAPACITY, DEFAULT_TTL, WeakKey, check_key
from .tlv import DecodeError
from .tpm import TpmState

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_ERROR = 2


class ConfigError(Exception):
    pass


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _read_psk(path) -> bytes:
    try:
        return check_key(Path(path).read_bytes())
    except OSError as exc:
        raise ConfigError(f"cannot read PSK file: {exc}") from exc
    except WeakKey as exc:
        raise ConfigError(str(exc)) from exc


def cmd_verifier(args) -> int:
    try:
        anchors = TrustAnchorSet.load_dir(args.anchors)
    except ValueError as exc:
        raise ConfigError(f"anchors directory {args.anchors}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read anchors: {exc}") from exc
    psk = _read_psk(args.psk_file)
    try:
        store = EnrollmentStore(args.store)
    except StoreCorrupt as exc:
        raise ConfigError(f"enrollment store {args.store}: {exc}") from exc
    if args.pending_capacity < 1:
        raise ConfigError("--pending-capacity must be positive")
    config = VerifierConfig(anchors, psk, store, args.challenge_ttl, args.pending_capacity, args.read_timeout)
    service = VerifierService(config)
    host, port = args.listen
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    try:
        bound = service.start(host, port)
    except OSError as exc:
        raise ConfigError(f"cannot listen on {host}:{port}: {exc}") from exc
    print(f"verifier listening on {bound[0]}:{bound[1]}", flush=True)
    try:
        service.wait()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return EXIT_PASS


def cmd_prover(args) -> int:
    psk = _read_psk(args.psk_file)
    try:
        image = parse_manifest(Path(args.manifest).read_text(), Path(args.manifest).parent)
    except (OSError, InvalidImage) as exc:
        raise ConfigError(f"manifest: {exc}") from exc
    files = collect_files(args.files_dir) if args.files_dir else []
    try:
        chain = SupplyChain.load(args.pki)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load PKI from {args.pki}: {exc}") from exc
    seed = bytes.fromhex(args.seed) if args.seed else None
    device = provision_device(chain, args.device_id, seed)
    device.boot(image, files)

    tamper = None
    if args.tamper:
        source, _, recnum = args.tamper.partition(":")
        if source not in ("firmware", "ima") or not recnum.isdigit():
            raise ConfigError("--tamper expects firmware:N or ima:N")
        log = device.firmware_log if source == "firmware" else device.ima_log
        if int(recnum) >= len(log):
            raise ConfigError(f"--tamper: {source} log has no record {recnum}")
        tamper = (source, int(recnum))

    agent = ProverAgent(device, psk, tamper=tamper, timeout=args.timeout)
    host, port = args.verifier
    try:
        result = agent.run(host, port)
    except OSError as exc:
        print(f"error: cannot reach verifier at {host}:{port}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if result.verdict is None:
        print(f"error: verifier refused the session: {result.nack}", file=sys.stderr)
        return EXIT_ERROR
    if result.enrolled_now:
        print(f"enrolled {args.device_id}")
    print(result.verdict.report())
    if args.report:
        Path(args.report).write_text(result.verdict.to_json() + "\n")
    return EXIT_PASS if result.verdict.overall else EXIT_FAIL


def _load_log(path) -> cel.CelLog:
    data = Path(path).read_bytes()
    if data[:1] in (b"", b"\x00"):
        return cel.decode_log(data)
    return cel.from_debug_text(data.decode())


def _describe(r: cel.CelRecord) -> str:
    digests = ",".join(f"{cel.HashAlg(d.alg).name.lower()}:{d.value.hex()}" for d in r.digests)
    payload = r.content.payload
    if r.content.content_type == cel.ContentType.IMA and b"\x00" in payload:
        shown = payload.split(b"\x00", 1)[0].decode(errors="replace")
    else:
        shown = payload.decode(errors="replace")
    return (f"recnum={r.recnum} pcr={r.pcr_index} type={r.content.content_type.name.lower()} "
            f"digests={digests} content={shown!r}")


def cmd_log(args) -> int:
    log = _load_log(args.path)
    if args.action == "inspect":
        for r in log:
            print(_describe(r))
        return EXIT_PASS
    data = Path(args.path).read_bytes()
    if data[:1] in (b"", b"\x00"):
        out = cel.to_debug_text(log).encode()
    else:
        out = cel.encode_log(log)
    if args.output:
        Path(args.output).write_bytes(out)
    else:
        sys.stdout.buffer.write(out)
    return EXIT_PASS


def cmd_cred(args) -> int:
    c = Credential.decode(Path(args.path).read_bytes())
    print(f"serial:        {c.serial}")
    print(f"role:          {c.role.value}")
    print(f"subject:       {c.subject}")
    print(f"issuer_serial: {c.issuer_serial}{' (self-signed)' if c.self_signed else ''}")
    print(f"public_key:    {c.public_key.hex() or '-'}")
    print(f"fingerprint:   {c.fingerprint.hex()}")
    for k, v in c.attributes:
        print(f"attribute:     {k}={v}")
    for role, fp in c.bound_refs:
        print(f"bound_ref:     {role.value} {fp.hex()}")
    print(f"signature:     {c.signature.hex()}")
    return EXIT_PASS


def cmd_boot_sim(args) -> int:
    try:
        image = parse_manifest(Path(args.manifest).read_text(), Path(args.manifest).parent)
    except (OSError, InvalidImage) as exc:
        raise ConfigError(f"manifest: {exc}") from exc
    tpm = TpmState()
    fw = boot(image, tpm)
    ima = ima_measure(collect_files(args.files_dir), tpm) if args.files_dir else cel.CelLog()
    if args.firmware_out:
        Path(args.firmware_out).write_bytes(cel.encode_log(fw))
    if args.ima_out:
        Path(args.ima_out).write_bytes(cel.encode_log(ima))
    print(f"firmware records: {len(fw)}  ima records: {len(ima)}")
    for i, v in enumerate(tpm.pcr_values(cel.HashAlg.SHA256)):
        if any(v):
            print(f"PCR{i:<2} sha256 {v.hex()}")
    return EXIT_PASS


def cmd_pki(args) -> int:
    chain = SupplyChain.generate(args.seed.encode())
    chain.save(args.directory)
    print(f"wrote anchors to {Path(args.directory) / 'anchors'}")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rattest", description="Remote attestation verifier and prover simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verifier").add_subparsers(dest="action", required=True).add_parser("serve")
    v.add_argument("--listen", type=_addr, default=("127.0.0.1", 7700))
    v.add_argument("--anchors", required=True)
    v.add_argument("--psk-file", required=True)
    v.add_argument("--store", required=True)
    v.add_argument("--challenge-ttl", type=float, default=DEFAULT_TTL)
    v.add_argument("--pending-capacity", type=int, default=DEFAULT_CAPACITY)
    v.add_argument("--read-timeout", type=float, default=10.0)
    v.set_defaults(func=cmd_verifier)

    pr = sub.add_parser("prover").add_subparsers(dest="action", required=True).add_parser("run")
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--files-dir")
    pr.add_argument("--verifier", type=_addr, required=True)
    pr.add_argument("--psk-file", required=True)
    pr.add_argument("--pki", required=True, help="directory written by `rattest pki init`")
    pr.add_argument("--device-id", default="device-1")
    pr.add_argument("--seed", help="hex device seed (defaults to the device id)")
    pr.add_argument("--tamper", help="firmware:N or ima:N")
    pr.add_argument("--report", help="write the machine-readable verdict here")
    pr.add_argument("--timeout", type=float, default=10.0)
    pr.set_defaults(func=cmd_prover)

    lg = sub.add_parser("log")
    lg.add_argument("action", choices=("inspect", "convert"))
    lg.add_argument("path")
    lg.add_argument("-o", "--output")
    lg.set_defaults(func=cmd_log)

    cr = sub.add_parser("cred")
    cr.add_argument("action", choices=("show",))
    cr.add_argument("path")
    cr.set_defaults(func=cmd_cred)

    bs = sub.add_parser("boot-sim")
    bs.add_argument("manifest")
    bs.add_argument("--files-dir")
    bs.add_argument("--firmware-out")
    bs.add_argument("--ima-out")
    bs.set_defaults(func=cmd_boot_sim)

    pk = sub.add_parser("pki").add_subparsers(dest="action", required=True).add_parser("init")
    pk.add_argument("directory")
    pk.add_argument("--seed", default="supply-chain")
    pk.set_defaults(func=cmd_pki)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except DecodeError as exc:
        print(f"error: {args.path if hasattr(args, 'path') else ''}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
