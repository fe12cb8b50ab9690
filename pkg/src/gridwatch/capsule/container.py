"""Capsule packaging, the ``EYC1`` container format and the key server.

Container layout::

    b"EYC1" | version:u8 | section* (u32 big-endian length + bytes)

Sections, in order: capsule_id, owner_id, key_id, policy (canonical JSON),
payload SHA-256, ciphertext (12-byte nonce + AES-256-GCM output),
Ed25519 owner signature.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import struct
import threading
import uuid
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from gridwatch.capsule.policy import CapsulePolicy

MAGIC = b"EYC1"
VERSION = 1
_SIG_DOMAIN = b"gridwatch-capsule-sig\x00"
_N_SECTIONS = 7


class CapsuleError(Exception):
    pass


class CapsuleFormatError(CapsuleError):
    pass


class BadSignature(CapsuleError):
    pass


class KeyDenied(CapsuleError):
    pass


class NotFound(CapsuleError):
    pass


class DigestMismatch(CapsuleError):
    pass


def _lp(*parts: bytes) -> bytes:
    return b"".join(struct.pack(">I", len(p)) + p for p in parts)


def encode_payload(objects: Iterable[tuple[str, bytes]]) -> bytes:
    items = [[name, base64.b64encode(data).decode()] for name, data in objects]
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ValueError("payload object names must be unique")
    return json.dumps(items, separators=(",", ":")).encode()


def decode_payload(blob: bytes) -> list[tuple[str, bytes]]:
    return [(name, base64.b64decode(b64)) for name, b64 in json.loads(blob)]


@dataclass(frozen=True)
class OwnerKey:
    owner_id: str
    private_key: Ed25519PrivateKey

    @classmethod
    def generate(cls, owner_id: str) -> OwnerKey:
        return cls(owner_id, Ed25519PrivateKey.generate())

    def public_bytes(self) -> bytes:
        return self.private_key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    def to_json(self) -> str:
        raw = self.private_key.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
        )
        return json.dumps({"owner_id": self.owner_id, "secret_key_b64": base64.b64encode(raw).decode()})

    @classmethod
    def from_json(cls, text: str) -> OwnerKey:
        d = json.loads(text)
        return cls(d["owner_id"], Ed25519PrivateKey.from_private_bytes(base64.b64decode(d["secret_key_b64"])))


@dataclass(frozen=True)
class Capsule:
    capsule_id: str
    owner_id: str
    key_id: str
    policy: CapsulePolicy
    payload_digest: bytes
    encrypted_payload: bytes
    signature: bytes

    def signed_message(self) -> bytes:
        return _SIG_DOMAIN + _lp(
            self.capsule_id.encode(), self.owner_id.encode(), self.key_id.encode(),
            self.policy.canonical_json(), self.payload_digest,
        )

    def verify_signature(self, owner_public: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(owner_public).verify(self.signature, self.signed_message())
        except (InvalidSignature, ValueError):
            return False
        return True

    def to_bytes(self) -> bytes:
        return MAGIC + bytes([VERSION]) + _lp(
            self.capsule_id.encode(), self.owner_id.encode(), self.key_id.encode(),
            self.policy.canonical_json(), self.payload_digest, self.encrypted_payload, self.signature,
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> Capsule:
        if blob[:4] != MAGIC:
            raise CapsuleFormatError("bad magic")
        if len(blob) < 5 or blob[4] != VERSION:
            raise CapsuleFormatError(f"unsupported capsule version {blob[4] if len(blob) > 4 else None}")
        pos, parts = 5, []
        for _ in range(_N_SECTIONS):
            if pos + 4 > len(blob):
                raise CapsuleFormatError("truncated section header")
            (n,) = struct.unpack_from(">I", blob, pos)
            pos += 4
            if pos + n > len(blob):
                raise CapsuleFormatError("truncated section")
            parts.append(blob[pos:pos + n])
            pos += n
        if pos != len(blob):
            raise CapsuleFormatError("trailing bytes")
        cid, owner, key_id, policy, digest, ct, sig = parts
        try:
            pol = CapsulePolicy.from_dict(json.loads(policy))
            return cls(cid.decode(), owner.decode(), key_id.decode(), pol, digest, ct, sig)
        except (ValueError, KeyError, TypeError) as exc:
            raise CapsuleFormatError(f"bad section contents: {exc}") from None


@dataclass(frozen=True)
class Attestation:
    """Platform descriptor plus the server-issued HMAC over it."""

    descriptor: bytes
    token: bytes

    def to_json(self) -> str:
        return json.dumps({"descriptor": self.descriptor.decode(), "token_hex": self.token.hex()})

    @classmethod
    def from_json(cls, text: str) -> Attestation:
        d = json.loads(text)
        return cls(d["descriptor"].encode(), bytes.fromhex(d["token_hex"]))


@dataclass
class KeyServer:
    """Escrows capsule keys; releases them only to attested platforms."""

    secret: bytes = field(default_factory=lambda: os.urandom(32))
    require_attestation: bool = True
    keys: dict[str, tuple[str, bytes]] = field(default_factory=dict)
    requests: list[tuple[str, bool]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def escrow(self, capsule_id: str, key_id: str, key: bytes) -> None:
        with self._lock:
            self.keys[capsule_id] = (key_id, key)

    def attest(self, descriptor: bytes) -> Attestation:
        """Issue a token for a platform already verified out of band."""
        return Attestation(descriptor, hmac.new(self.secret, descriptor, hashlib.sha256).digest())

    def release_key(self, capsule_id: str, attestation: Attestation | None) -> tuple[str, bytes]:
        with self._lock:
            ok = not self.require_attestation or (
                attestation is not None
                and hmac.compare_digest(
                    hmac.new(self.secret, attestation.descriptor, hashlib.sha256).digest(), attestation.token
                )
            )
            self.requests.append((capsule_id, ok))
            if capsule_id not in self.keys:
                raise NotFound(capsule_id)
            if not ok:
                raise KeyDenied(f"attestation rejected for {capsule_id}")
            return self.keys[capsule_id]

    def to_json(self) -> str:
        return json.dumps({
            "secret_b64": base64.b64encode(self.secret).decode(),
            "require_attestation": self.require_attestation,
            "keys": {cid: [kid, base64.b64encode(k).decode()] for cid, (kid, k) in sorted(self.keys.items())},
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> KeyServer:
        d = json.loads(text)
        return cls(
            secret=base64.b64decode(d["secret_b64"]),
            require_attestation=d.get("require_attestation", True),
            keys={cid: (kid, base64.b64decode(k)) for cid, (kid, k) in d.get("keys", {}).items()},
        )


def release_key(capsule_id: str, attestation: Attestation | None, keyserver: KeyServer) -> bytes:
    return keyserver.release_key(capsule_id, attestation)[1]


def package_capsule(
    payload: Mapping[str, bytes] | Iterable[tuple[str, bytes]],
    policy: CapsulePolicy,
    owner: OwnerKey,
    keyserver: KeyServer,
) -> Capsule:
    """Encrypt and sign ``payload``; the key goes to ``keyserver`` only."""
    objects = list(payload.items()) if isinstance(payload, Mapping) else list(payload)
    plaintext = encode_payload(objects)
    capsule_id = str(uuid.uuid4())
    key_id = uuid.uuid4().hex
    key = AESGCM.generate_key(bit_length=256)
    nonce = os.urandom(12)
    ct = nonce + AESGCM(key).encrypt(nonce, plaintext, capsule_id.encode())
    unsigned = Capsule(capsule_id, owner.owner_id, key_id, policy, hashlib.sha256(plaintext).digest(), ct, b"")
    sig = owner.private_key.sign(unsigned.signed_message())
    keyserver.escrow(capsule_id, key_id, key)
    return Capsule(capsule_id, owner.owner_id, key_id, policy, unsigned.payload_digest, ct, sig)


def decrypt_capsule(capsule: Capsule, key: bytes) -> list[tuple[str, bytes]]:
    ct = capsule.encrypted_payload
    try:
        plaintext = AESGCM(key).decrypt(ct[:12], ct[12:], capsule.capsule_id.encode())
    except (InvalidTag, ValueError):
        raise DigestMismatch("payload failed authenticated decryption") from None
    if not hmac.compare_digest(hashlib.sha256(plaintext).digest(), capsule.payload_digest):
        raise DigestMismatch("payload digest does not match signed digest")
    return decode_payload(plaintext)
