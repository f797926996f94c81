"""Helpers for driving the installed command line in a subprocess."""

import os
import re
import subprocess
import sys
import time

MANIFEST = """\
# kind pcr name code
srtm 0 S-RTM 73727466
firmware 1 FW-C1 0102030405
firmware 2 FW-C2 @fw2.bin
bootloader 8 shimx64 5348494d
os 9 vmlinuz 4b45524e454c
"""


def rattest(*args, timeout=30, **kw):
    return subprocess.run([sys.executable, "-m", "rattest", *map(str, args)],
                          capture_output=True, text=True, timeout=timeout, **kw)


def write_fixture(root):
    """PKI, PSK, manifest and a small measured-file tree under ``root``."""
    assert rattest("pki", "init", root / "pki", "--seed", "cli-tests").returncode == 0
    (root / "psk").write_bytes(b"0123456789abcdef0123")
    (root / "fw2.bin").write_bytes(b"second firmware volume")
    (root / "manifest.txt").write_text(MANIFEST)
    files = root / "files"
    (files / "bin").mkdir(parents=True)
    (files / "bin" / "sh").write_bytes(b"shell")
    (files / "bin" / "ls").write_bytes(b"list")
    return root


class Verifier:
    def __init__(self, root, *extra):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "rattest", "verifier", "serve", "--listen", "127.0.0.1:0",
             "--anchors", root / "pki" / "anchors", "--psk-file", root / "psk",
             "--store", root / "store.bin", *extra],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        line = self.proc.stdout.readline()
        m = re.search(r"listening on (\S+):(\d+)", line)
        if not m:
            self.proc.kill()
            raise RuntimeError(f"verifier did not start: {line!r} {self.proc.stderr.read()}")
        self.addr = f"{m.group(1)}:{m.group(2)}"

    def kill(self):
        self.proc.kill()
        self.proc.wait(5)

    def stop(self):
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.kill()
        self.proc.stdout.close()
        self.proc.stderr.close()


def prove(root, verifier, *extra, device="device-1"):
    return rattest("prover", "run", "--manifest", root / "manifest.txt", "--files-dir", root / "files",
                   "--verifier", verifier.addr if hasattr(verifier, "addr") else verifier,
                   "--psk-file", root / "psk", "--pki", root / "pki", "--device-id", device, *extra)
