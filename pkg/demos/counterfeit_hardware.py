# Counterfeit TPMs and swapped platforms
#
# Each fault class below changes one thing about an honest bundle. The
# verdict should blame exactly one check.

from rattest.faults import FAULTS, counterfeit_ek
from rattest.provision import SupplyChain, honest_device
from rattest.verifier import attest

chain = SupplyChain.generate(b"demo")
dev = honest_device(chain, "plc-3")
golden = dev.golden()
nonce = b"n" * 32

# An EK credential issued by a vendor CA under a root nobody trusts. The
# platform credential still names the genuine EK, so binding fails too.

v = attest(counterfeit_ek(dev, nonce), golden, nonce, chain.anchors)
print("counterfeit EK ->", v.failed())

# The six single-fault classes

for name, (inject, expected) in FAULTS.items():
    v = attest(inject(dev, chain, nonce), golden, nonce, chain.anchors)
    print(f"{name:18} expected {expected:16} got {v.failed()}")
