"""Capsules: encrypted, signed data packages whose policies follow their
data through a taint-tracked object graph."""

from gridwatch.capsule.container import (
    Attestation,
    BadSignature,
    Capsule,
    CapsuleError,
    CapsuleFormatError,
    DigestMismatch,
    KeyDenied,
    KeyServer,
    NotFound,
    OwnerKey,
    decrypt_capsule,
    package_capsule,
    release_key,
)
from gridwatch.capsule.policy import (
    ANY,
    OPERATIONS,
    TIERS,
    CapsulePolicy,
    Decision,
    InstalledPolicy,
    LabelPattern,
    Rule,
    check_access,
)
from gridwatch.capsule.taint import (
    OBJECT_KINDS,
    CorruptStore,
    FlowEvent,
    InstalledCapsule,
    ObjectGraph,
    PolicyViolation,
    TaintDatabase,
    TaintEngine,
    install_capsule,
)

__all__ = [
    "ANY", "OBJECT_KINDS", "OPERATIONS", "TIERS", "Attestation", "BadSignature", "Capsule", "CapsuleError",
    "CapsuleFormatError", "CapsulePolicy", "CorruptStore", "Decision", "DigestMismatch", "FlowEvent",
    "InstalledCapsule", "InstalledPolicy", "KeyDenied", "KeyServer", "LabelPattern", "NotFound", "ObjectGraph",
    "OwnerKey", "PolicyViolation", "Rule", "TaintDatabase", "TaintEngine", "check_access", "decrypt_capsule",
    "install_capsule", "package_capsule", "release_key",
]
