# The HOTP gate and what an attacker can do to it
#
# Before any attestation traffic the verifier hands out a counter and expects
# the 8-digit HOTP code for it. Each counter is usable once.

import time

from rattest.spa import PendingTable, TableFull, hotp

key = b"12345678901234567890"
print([hotp(key, c) for c in range(3)])   # reference key, counters 0..2

table = PendingTable(capacity=4, ttl=10.0)
ch = table.issue_challenge("dev-a")
code = hotp(key, ch.counter)
print("first use:", table.verify_auth("dev-a", ch.counter, code, key))
print("replay:   ", table.verify_auth("dev-a", ch.counter, code, key))

# Unauthenticated peers can only occupy a bounded table. Once it is full new
# requests are refused rather than queued.

for i in range(4):
    table.issue_challenge(f"flood-{i}")
try:
    table.issue_challenge("one-more")
except TableFull:
    print("table full at", len(table), "entries")

# Expired entries are evicted on the next request.

clock = [0.0]
t = PendingTable(capacity=2, ttl=1.0, clock=lambda: clock[0])
t.issue_challenge("x"); t.issue_challenge("y")
clock[0] = 5.0
t.issue_challenge("z")
print("after expiry:", len(t), "pending")

# A restarted verifier starts counters from the wall clock, so a code seen
# before the restart does not match anything issued after it.

before = PendingTable().issue_challenge("d").counter
time.sleep(0.002)
after = PendingTable().issue_challenge("d").counter
print("counter increased across restart:", after > before)
