"""Software remote attestation: simulated TPM, measured boot, CEL event logs,
supplier credential binding, HOTP-gated provisioning and a quote-regenerating verifier."""

from .cel import CelContent, CelLog, CelRecord, ContentType, Digest, HashAlg, LogSource
from .credentials import Credential, Role, TrustAnchorSet
from .tpm import Quote, QuoteBody, TpmState
from .verifier import AttestationBundle, AttestationVerdict, GoldenTemplate, attest

__version__ = "0.1.0"
