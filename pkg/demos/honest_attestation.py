# Honest attestation, start to finish
#
# A device is manufactured under a simulated supply chain, boots, enrolls
# with a verifier over a loopback socket, and then attests.

import hashlib
import pathlib
import tempfile

from rattest.provision import SupplyChain, honest_device
from rattest.service import EnrollmentStore, ProverAgent, VerifierConfig, VerifierService


# The supply chain: a TPM manufacturer root with an EK issuing CA, a platform
# supplier root, and the device owner's root. The verifier trusts the three roots.

chain = SupplyChain.generate(b"demo")
for c in chain.anchors.anchors:
    print(c.serial, c.role.value, c.subject)

# Provision a device and boot it. The firmware log holds one info record and
# one record per component; the IMA log holds one record per measured file.

dev = honest_device(chain, "edge-router-7", n_components=5, n_files=3)
print(len(dev.firmware_log), "firmware records,", len(dev.ima_log), "IMA records")
for rec in dev.firmware_log:
    print(f"  #{rec.recnum} PCR{rec.pcr_index:<2} {rec.content.payload[:40]!r}")

# Start a verifier. Both sides share a pre-shared key used only for the
# HOTP challenge that gates the session.

psk = hashlib.sha256(b"demo psk").digest()
store_path = pathlib.Path(tempfile.mkdtemp()) / "enrollments.bin"
svc = VerifierService(VerifierConfig(chain.anchors, psk, EnrollmentStore(store_path)))
host, port = svc.start()

# First contact enrolls the device (its golden template is stored), then attests.

first = ProverAgent(dev, psk).run(host, port)
print("enrolled now:", first.enrolled_now)
print(first.verdict.report())

# Later sessions skip enrollment.

second = ProverAgent(dev, psk).run(host, port)
print("enrolled now:", second.enrolled_now, " overall:", second.verdict.overall)
svc.stop()
