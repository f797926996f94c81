import hashlib
import random

import pytest
from hypothesis import given, settings, strategies as st

from rattest.boot import tamper
from rattest.cel import CelContent, CelLog, CelRecord, ContentType, Digest, HashAlg, encode_log
from rattest.faults import FAULTS, counterfeit_ek
from rattest.provision import sample_files, sample_image
from rattest.tpm import Quote, selection_bitmap
from rattest.verifier import (
    CHECKS, PASS, AttestationVerdict, CheckResult, DeviceUnknown, Finding, GoldenTemplate,
    MissingSha256Digest, attest, compare_rim, fail, replay_log, rim_from_log, verify_quote,
)

NONCE = bytes(range(32))


def test_replay_matches_device_bank(device):
    replay = replay_log(device.firmware_log, device.ima_log)
    assert list(replay.pcr_values) == device.tpm.pcr_values(HashAlg.SHA256)


def test_replay_empty():
    assert replay_log(CelLog()).pcr_values == (bytes(32),) * 24


def test_replay_requires_sha256():
    rec = CelRecord(0, 0, (Digest(HashAlg.SHA1, bytes(20)),), CelContent(ContentType.FIRMWARE))
    with pytest.raises(MissingSha256Digest):
        replay_log(CelLog((rec,)))


def test_replay_untouched_slots_zero(device):
    replay = replay_log(device.firmware_log)
    touched = {r.pcr_index for r in device.firmware_log}
    assert all(replay.pcr_values[i] == bytes(32) for i in range(24) if i not in touched)


def test_compare_rim_self(device):
    rim = rim_from_log(device.firmware_log)
    assert all(f.kind == Finding.MATCH for f in compare_rim(device.firmware_log, rim, "firmware"))


def test_compare_rim_one_tampered_digest(device):
    rim = rim_from_log(device.firmware_log)
    for recnum in range(len(device.firmware_log)):
        findings = compare_rim(tamper(device.firmware_log, recnum, "digest"), rim, "firmware")
        bad = [f for f in findings if f.kind != Finding.MATCH]
        assert [(f.recnum, f.kind) for f in bad] == [(recnum, Finding.DIGEST_MISMATCH)]


def test_compare_rim_payload_change_is_content_mismatch(device):
    rim = rim_from_log(device.ima_log)
    findings = compare_rim(tamper(device.ima_log, 1), rim, "ima")
    assert [f.kind for f in findings] == [Finding.MATCH, Finding.CONTENT_MISMATCH, Finding.MATCH]


def test_compare_rim_extra_and_missing(device):
    log = device.firmware_log
    rim = rim_from_log(log)
    extra = CelRecord(len(log), 4, (Digest(HashAlg.SHA256, bytes(32)),), CelContent(ContentType.FIRMWARE, b"x"))
    findings = compare_rim(CelLog(log.records + (extra,)), rim, "firmware")
    assert findings[-1].kind == Finding.UNEXPECTED_RECORD
    assert findings[-1].recnum == len(log)
    findings = compare_rim(CelLog(log.records[:-1]), rim, "firmware")
    assert findings[-1].kind == Finding.MISSING_RECORD


def test_compare_rim_order_sensitive(device):
    log = device.ima_log
    rim = rim_from_log(log)
    import dataclasses
    swapped = CelLog((dataclasses.replace(log[1], recnum=0), dataclasses.replace(log[0], recnum=1)) + log.records[2:])
    assert any(f.kind != Finding.MATCH for f in compare_rim(swapped, rim, "ima"))


def test_verify_quote_honest(device):
    q = device.quote(NONCE)
    out = verify_quote(q, device.tpm.ak_public, NONCE, replay_log(device.firmware_log, device.ima_log))
    assert all(r.passed for r in out.values())


def test_verify_quote_stale_nonce(device):
    q = device.quote(b"\x01" * 32)
    out = verify_quote(q, device.tpm.ak_public, NONCE, replay_log(device.firmware_log, device.ima_log))
    assert not out["nonce_match"].passed
    assert out["quote_signature"].passed and out["pcr_match"].passed


def test_verify_quote_tampered_log(device):
    q = device.quote(NONCE)
    bad_log = tamper(device.firmware_log, 2, "digest")
    out = verify_quote(q, device.tpm.ak_public, NONCE, replay_log(bad_log, device.ima_log))
    assert not out["pcr_match"].passed
    assert out["quote_signature"].passed and out["nonce_match"].passed


def test_attest_honest(chain, device):
    v = attest(device.bundle(NONCE), device.golden(), NONCE, chain.anchors)
    assert v.overall, v.report()


def test_attest_unknown_device(chain, device):
    with pytest.raises(DeviceUnknown):
        attest(device.bundle(NONCE), None, NONCE, chain.anchors)


def test_attest_counterfeit_ek(chain, device):
    v = attest(counterfeit_ek(device, NONCE), device.golden(), NONCE, chain.anchors)
    assert not v.checks["cert_chain"].passed
    assert "unknown_issuer" in v.checks["cert_chain"].detail
    assert not v.overall


def test_attest_ima_single_modified_file(chain, device):
    golden = device.golden()
    bundle = device.bundle(NONCE)
    bundle.ima_log = tamper(device.ima_log, 2, "digest")
    v = attest(bundle, golden, NONCE, chain.anchors)
    assert not v.checks["ima_log"].passed
    assert v.checks["firmware_log"].passed
    assert not v.overall


@pytest.mark.parametrize("name", sorted(FAULTS))
def test_single_fault_attribution(chain, device, name):
    inject, check = FAULTS[name]
    golden = device.golden()
    v = attest(inject(device, chain, NONCE), golden, NONCE, chain.anchors)
    assert v.failed() == [check], v.report()


def test_binding_necessity(chain, device):
    inject, _ = FAULTS["broken_binding"]
    v = attest(inject(device, chain, NONCE), device.golden(), NONCE, chain.anchors)
    assert v.checks["cert_chain"].passed
    assert not v.overall


def test_nv_copy_mismatch(chain, device):
    bundle = device.bundle(NONCE)
    bundle.nv_certs = {1: bundle.nv_certs[1]}
    v = attest(bundle, device.golden(), NONCE, chain.anchors)
    assert v.failed() == ["nv_certs"]


def test_raw_garbage_fails_checks_not_crash(chain, device):
    bundle = device.bundle(NONCE)
    bundle.firmware_log = b"\x00\x00\x00"
    bundle.quote = b"junk"
    bundle.credentials = [b"\x20"]
    v = attest(bundle, device.golden(), NONCE, chain.anchors)
    assert set(v.failed()) >= {"firmware_log", "quote_signature", "pcr_match", "nonce_match", "cert_chain"}


@settings(max_examples=200)
@given(st.lists(st.booleans(), min_size=len(CHECKS), max_size=len(CHECKS)))
def test_verdict_conjunction(flags):
    v = AttestationVerdict({name: PASS if ok else fail("x") for name, ok in zip(CHECKS, flags)})
    assert v.overall == all(flags)
    assert AttestationVerdict.from_dict(v.to_dict()).to_dict() == v.to_dict()


def test_golden_template_round_trip(device):
    g = device.golden()
    again = GoldenTemplate.decode(g.encode())
    assert again == g
    assert set(again.cert_fingerprints) == set(g.credentials)


def test_replay_extend_equivalence_random_images(chain):
    from rattest.provision import provision_device
    rng = random.Random(11)
    dev = provision_device(chain, "eq")
    for i in range(100):
        salt = rng.randbytes(8)
        dev.boot(sample_image(rng.randint(1, 12), salt), sample_files(rng.randint(0, 6), salt))
        assert list(replay_log(dev.firmware_log, dev.ima_log).pcr_values) == dev.tpm.pcr_values()
        q = dev.quote(NONCE)
        assert replay_log(dev.firmware_log, dev.ima_log).composite(q.body.pcr_selection) == q.body.pcr_digest
