# Catching a modified boot component or file
#
# The verifier compares each presented log record with the enrolled reference
# and also recomputes the PCR composite from the logs to check the quote.

from rattest.boot import tamper
from rattest.provision import SupplyChain, honest_device
from rattest.verifier import attest, compare_rim, Finding

chain = SupplyChain.generate(b"demo")
dev = honest_device(chain, "kiosk-12")
golden = dev.golden()
nonce = bytes(32)

print(attest(dev.bundle(nonce), golden, nonce, chain.anchors).report())

# Flip one byte of the bootloader record's payload. The digests stay intact,
# so only the record hash in the reference notices.

bundle = dev.bundle(nonce)
bundle.firmware_log = tamper(dev.firmware_log, 3, "payload")
verdict = attest(bundle, golden, nonce, chain.anchors)
print()
print(verdict.report())

# Which record was it?

for f in compare_rim(bundle.firmware_log, golden.firmware_rim, "firmware"):
    if f.kind != Finding.MATCH:
        print("record", f.recnum, f.kind.value)

# Same for a measured file, this time changing its digest. The replayed PCR10
# no longer matches the quote either.

bundle = dev.bundle(nonce)
bundle.ima_log = tamper(dev.ima_log, 1, "digest")
print()
print("failed checks:", attest(bundle, golden, nonce, chain.anchors).failed())
