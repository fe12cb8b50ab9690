"""Signed incident reports: canonical encoding, Ed25519 envelopes, replay
defence, persistence and mapping of report locations onto grid branches.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import math
import os
import random
import threading
import time
import unicodedata
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from gridwatch.grid import GridSpec

log = logging.getLogger(__name__)

MODALITIES = ("image", "video", "audio")
WINDOW_MS = 300_000
DEFAULT_RADIUS_M = 500.0
EARTH_RADIUS_M = 6_371_008.8


# -- rejections --------------------------------------------------------------

class Rejection(Exception):
    reason = "Rejected"
    status = 400

    def __init__(self, detail: str = ""):
        self.detail = detail
        super().__init__(f"{self.reason}: {detail}" if detail else self.reason)

    def to_dict(self) -> dict[str, Any]:
        return {"decision": "rejected", "reason": self.reason, "detail": self.detail}


class Malformed(Rejection):
    reason = "Malformed"
    status = 400


class UnknownKey(Rejection):
    reason = "UnknownKey"
    status = 401


class SignatureInvalid(Rejection):
    reason = "SignatureInvalid"
    status = 401


class Revoked(Rejection):
    reason = "Revoked"
    status = 403


class StaleTimestamp(Rejection):
    reason = "StaleTimestamp"
    status = 422


class Replay(Rejection):
    reason = "Replay"
    status = 409


# -- report ----------------------------------------------------------------

@dataclass(frozen=True)
class Attachment:
    modality: str
    content_digest: str
    byte_length: int


@dataclass(frozen=True)
class IncidentReport:
    report_id: str
    device_key_id: str
    timestamp: int
    location: tuple[float, float]
    confidence: float
    description: str
    nonce: str
    attachments: tuple[Attachment, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["location"] = list(self.location)
        d["attachments"] = [asdict(a) for a in self.attachments]
        return d

    @classmethod
    def from_dict(cls, d: Any) -> IncidentReport:
        """Build and validate; raises :class:`Malformed`."""
        if not isinstance(d, dict):
            raise Malformed("report must be a JSON object")
        expected = {f for f in cls.__dataclass_fields__}
        if set(d) != expected:
            raise Malformed(f"report fields must be exactly {sorted(expected)}")
        try:
            atts = tuple(_attachment(a) for a in d["attachments"])
            loc = d["location"]
            if not (isinstance(loc, list) and len(loc) == 2):
                raise Malformed("location must be [lat, lon]")
            r = cls(
                report_id=d["report_id"],
                device_key_id=d["device_key_id"],
                timestamp=d["timestamp"],
                location=(loc[0], loc[1]),
                confidence=d["confidence"],
                description=d["description"],
                nonce=d["nonce"],
                attachments=atts,
            )
        except (TypeError, KeyError) as exc:
            raise Malformed(str(exc)) from None
        validate_report(r)
        return r


def _attachment(a: Any) -> Attachment:
    if not isinstance(a, dict) or set(a) != {"modality", "content_digest", "byte_length"}:
        raise Malformed("attachment must have modality, content_digest, byte_length")
    return Attachment(a["modality"], a["content_digest"], a["byte_length"])


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_hex(s: Any, length: int) -> bool:
    if not isinstance(s, str) or len(s) != length:
        return False
    try:
        bytes.fromhex(s)
    except ValueError:
        return False
    return s == s.lower()


def validate_report(r: IncidentReport) -> None:
    try:
        uuid.UUID(r.report_id)
    except (ValueError, AttributeError, TypeError):
        raise Malformed("report_id must be a UUID") from None
    if not isinstance(r.device_key_id, str) or not r.device_key_id:
        raise Malformed("device_key_id must be a non-empty string")
    if isinstance(r.timestamp, bool) or not isinstance(r.timestamp, int) or r.timestamp < 0:
        raise Malformed("timestamp must be non-negative epoch milliseconds")
    lat, lon = r.location
    if not (_is_num(lat) and _is_num(lon) and -90 <= lat <= 90 and -180 <= lon <= 180):
        raise Malformed("location out of range")
    if not (_is_num(r.confidence) and 0.0 <= r.confidence <= 1.0):
        raise Malformed("confidence must be in [0, 1]")
    if not isinstance(r.description, str):
        raise Malformed("description must be text")
    if not _is_hex(r.nonce, 32):
        raise Malformed("nonce must be 128-bit lowercase hex")
    for a in r.attachments:
        if a.modality not in MODALITIES:
            raise Malformed(f"attachment modality must be one of {MODALITIES}")
        if not _is_hex(a.content_digest, 64):
            raise Malformed("attachment digest must be SHA-256 hex")
        if isinstance(a.byte_length, bool) or not isinstance(a.byte_length, int) or a.byte_length < 0:
            raise Malformed("attachment byte_length must be a non-negative integer")


def _nfc(obj: Any) -> Any:
    if isinstance(obj, str):
        return unicodedata.normalize("NFC", obj)
    if isinstance(obj, dict):
        return {_nfc(k): _nfc(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nfc(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError("non-finite number cannot be canonicalised")
    return obj


def canonical_bytes(r: IncidentReport) -> bytes:
    """Sorted keys, no whitespace, shortest round-trip floats, NFC UTF-8."""
    doc = _nfc(r.to_dict())
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def new_nonce(rng: random.Random | None = None) -> str:
    """128-bit hex nonce. ``rng`` exists for deterministic tests only."""
    if rng is None:
        return os.urandom(16).hex()
    return rng.getrandbits(128).to_bytes(16, "big").hex()


def make_report(
    device_key_id: str,
    location: tuple[float, float],
    confidence: float,
    description: str = "",
    attachments: Iterable[Attachment] = (),
    *,
    timestamp: int | None = None,
    rng: random.Random | None = None,
) -> IncidentReport:
    rid = str(uuid.UUID(int=rng.getrandbits(128), version=4)) if rng else str(uuid.uuid4())
    return IncidentReport(
        report_id=rid,
        device_key_id=device_key_id,
        timestamp=now_ms() if timestamp is None else timestamp,
        location=(float(location[0]), float(location[1])),
        confidence=float(confidence),
        description=description,
        nonce=new_nonce(rng),
        attachments=tuple(attachments),
    )


def now_ms() -> int:
    return time.time_ns() // 1_000_000


# -- keys and envelopes ------------------------------------------------------

@dataclass(frozen=True)
class SigningKey:
    device_key_id: str
    private_key: Ed25519PrivateKey

    @classmethod
    def generate(cls, device_key_id: str) -> SigningKey:
        return cls(device_key_id, Ed25519PrivateKey.generate())

    def public_bytes(self) -> bytes:
        return self.private_key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    def to_json(self) -> str:
        raw = self.private_key.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
        )
        return json.dumps({"device_key_id": self.device_key_id, "secret_key_b64": base64.b64encode(raw).decode()})

    @classmethod
    def from_json(cls, text: str) -> SigningKey:
        d = json.loads(text)
        raw = base64.b64decode(d["secret_key_b64"], validate=True)
        return cls(d["device_key_id"], Ed25519PrivateKey.from_private_bytes(raw))


@dataclass(frozen=True)
class SignedEnvelope:
    payload: bytes
    signature: bytes
    device_key_id: str

    def to_dict(self) -> dict[str, str]:
        return {
            "payload_b64": base64.b64encode(self.payload).decode(),
            "signature_b64": base64.b64encode(self.signature).decode(),
            "device_key_id": self.device_key_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Any) -> SignedEnvelope:
        if not isinstance(d, dict) or set(d) != {"payload_b64", "signature_b64", "device_key_id"}:
            raise Malformed("envelope must have payload_b64, signature_b64, device_key_id")
        if not all(isinstance(v, str) for v in d.values()):
            raise Malformed("envelope fields must be strings")
        try:
            payload = base64.b64decode(d["payload_b64"], validate=True)
            sig = base64.b64decode(d["signature_b64"], validate=True)
        except (binascii.Error, ValueError):
            raise Malformed("bad base64") from None
        return cls(payload, sig, d["device_key_id"])

    @classmethod
    def from_json(cls, text: str | bytes) -> SignedEnvelope:
        try:
            d = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise Malformed(f"envelope is not JSON: {exc}") from None
        return cls.from_dict(d)


def sign(r: IncidentReport, key: SigningKey) -> SignedEnvelope:
    if r.device_key_id != key.device_key_id:
        raise ValueError(f"report device_key_id {r.device_key_id!r} does not match key {key.device_key_id!r}")
    validate_report(r)
    payload = canonical_bytes(r)
    return SignedEnvelope(payload, key.private_key.sign(payload), key.device_key_id)


@dataclass
class DeviceKey:
    device_key_id: str
    public_key: bytes
    enrolled_at: int = 0
    revoked: bool = False
    role: str | None = None

    def __post_init__(self) -> None:
        self._verifier = Ed25519PublicKey.from_public_bytes(self.public_key)

    def verify(self, signature: bytes, payload: bytes) -> bool:
        try:
            self._verifier.verify(signature, payload)
        except InvalidSignature:
            return False
        return True


class DeviceRegistry:
    def __init__(self, keys: Iterable[DeviceKey] = ()):
        self._keys: dict[str, DeviceKey] = {}
        for k in keys:
            self.enroll(k)

    def enroll(self, key: DeviceKey) -> None:
        if key.device_key_id in self._keys:
            raise ValueError(f"duplicate device_key_id {key.device_key_id!r}")
        self._keys[key.device_key_id] = key

    def revoke(self, device_key_id: str) -> None:
        self._keys[device_key_id].revoked = True

    def get(self, device_key_id: str) -> DeviceKey | None:
        return self._keys.get(device_key_id)

    def __len__(self) -> int:
        return len(self._keys)

    @classmethod
    def from_json(cls, text: str) -> DeviceRegistry:
        entries = json.loads(text)
        if not isinstance(entries, list):
            raise ValueError("registry must be a JSON list")
        keys = []
        for e in entries:
            keys.append(DeviceKey(
                device_key_id=e["device_key_id"],
                public_key=base64.b64decode(e["public_key_b64"], validate=True),
                enrolled_at=int(e.get("enrolled_at", 0)),
                revoked=bool(e.get("revoked", False)),
                role=e.get("role"),
            ))
        return cls(keys)

    def to_json(self) -> str:
        out = []
        for k in self._keys.values():
            row: dict[str, Any] = {"device_key_id": k.device_key_id,
                                   "public_key_b64": base64.b64encode(k.public_key).decode(),
                                   "enrolled_at": k.enrolled_at, "revoked": k.revoked}
            if k.role is not None:
                row["role"] = k.role
            out.append(row)
        return json.dumps(out, indent=2)


class ReplayIndex:
    """Seen (device_key_id, nonce) pairs with their report timestamps."""

    def __init__(self) -> None:
        self._seen: dict[tuple[str, str], int] = {}
        self.lock = threading.Lock()

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._seen

    def __len__(self) -> int:
        return len(self._seen)

    def add(self, key: tuple[str, str], timestamp: int) -> None:
        self._seen[key] = timestamp

    def check_and_add(self, key: tuple[str, str], timestamp: int) -> None:
        with self.lock:
            if key in self._seen:
                raise Replay(f"nonce {key[1]} already used by {key[0]}")
            self._seen[key] = timestamp

    def prune(self, now: int, window_ms: int = WINDOW_MS) -> int:
        """Forget entries that the timestamp check alone would now reject."""
        cutoff = now - window_ms - 1
        old = [k for k, ts in self._seen.items() if ts < cutoff]
        for k in old:
            del self._seen[k]
        return len(old)


def verify(
    e: SignedEnvelope,
    reg: DeviceRegistry,
    now: int,
    replay: ReplayIndex | None = None,
    window_ms: int = WINDOW_MS,
) -> IncidentReport:
    """Return the report or raise the matching :class:`Rejection`.

    When ``replay`` is given the nonce is recorded atomically with acceptance.
    """
    key = reg.get(e.device_key_id)
    if key is None:
        raise UnknownKey(e.device_key_id)
    if key.revoked:
        raise Revoked(e.device_key_id)
    if not key.verify(e.signature, e.payload):
        raise SignatureInvalid("signature does not verify over payload")
    try:
        doc = json.loads(e.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise Malformed(f"payload is not JSON: {exc}") from None
    report = IncidentReport.from_dict(doc)
    if canonical_bytes(report) != e.payload:
        raise Malformed("payload is not in canonical form")
    if report.device_key_id != e.device_key_id:
        raise SignatureInvalid("payload device_key_id differs from envelope")
    if abs(now - report.timestamp) > window_ms:
        raise StaleTimestamp(f"timestamp {report.timestamp} is {abs(now - report.timestamp)} ms from now")
    if replay is not None:
        replay.check_and_add((report.device_key_id, report.nonce), report.timestamp)
    return report


# -- geography ---------------------------------------------------------------

@dataclass(frozen=True)
class GeoReference:
    """Affine placement of grid map units on the ground.

    Map point ``(0, 0)`` sits at ``(origin_lat, origin_lon)``; one map unit is
    ``meters_per_unit`` metres east (x) or north (y). Lat/lon use a local
    equirectangular projection, adequate over a few hundred kilometres.
    """

    origin_lat: float = 40.0
    origin_lon: float = -74.5
    meters_per_unit: float = 1000.0

    def latlon_to_meters(self, lat: float, lon: float) -> tuple[float, float]:
        phi0 = math.radians(self.origin_lat)
        x = EARTH_RADIUS_M * math.radians(lon - self.origin_lon) * math.cos(phi0)
        y = EARTH_RADIUS_M * math.radians(lat - self.origin_lat)
        return x, y

    def map_to_latlon(self, x: float, y: float) -> tuple[float, float]:
        phi0 = math.radians(self.origin_lat)
        mx, my = x * self.meters_per_unit, y * self.meters_per_unit
        lat = self.origin_lat + math.degrees(my / EARTH_RADIUS_M)
        lon = self.origin_lon + math.degrees(mx / (EARTH_RADIUS_M * math.cos(phi0)))
        return lat, lon


DEFAULT_GEO = GeoReference()
_TIE_M = 1e-6


def _segment_distance(p: tuple[float, float], a: tuple[float, float], b: tuple[float, float]) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    denom = dx * dx + dy * dy
    t = 0.0 if denom == 0 else max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / denom))
    return math.hypot(p[0] - (ax + t * dx), p[1] - (ay + t * dy))


def map_to_asset(
    location: tuple[float, float],
    spec: GridSpec,
    radius: float = DEFAULT_RADIUS_M,
    geo: GeoReference = DEFAULT_GEO,
) -> tuple[str, int] | None:
    """Nearest in-service branch within ``radius`` metres; lowest id wins ties."""
    p = geo.latlon_to_meters(*location)
    index = spec.bus_index()
    best: tuple[float, int] | None = None
    for br in sorted(spec.branches, key=lambda b: b.id):
        if not br.in_service:
            continue
        ca, cb = spec.buses[index[br.from_bus]].coord, spec.buses[index[br.to_bus]].coord
        if ca is None or cb is None:
            continue
        m = geo.meters_per_unit
        d = _segment_distance(p, (ca[0] * m, ca[1] * m), (cb[0] * m, cb[1] * m))
        if best is None or d < best[0] - _TIE_M:
            best = (d, br.id)
    if best is None or best[0] > radius:
        return None
    return ("branch", best[1])


# -- store and ingestion -----------------------------------------------------

@dataclass(frozen=True)
class AcceptedReport:
    report: IncidentReport
    asset: tuple[str, int] | None
    accepted_at: int

    @property
    def report_id(self) -> str:
        return self.report.report_id

    @property
    def confidence(self) -> float:
        return self.report.confidence


@dataclass(frozen=True)
class AcceptanceRecord:
    report_id: str
    asset: tuple[str, int] | None
    decision: str = "accepted"

    def to_dict(self) -> dict[str, Any]:
        return {"report_id": self.report_id, "asset": list(self.asset) if self.asset else None,
                "decision": self.decision}


class StoreError(RuntimeError):
    pass


@dataclass
class ReportStore:
    """Append-only NDJSON log of accepted reports plus a replay index.

    With ``path=None`` the store lives in memory only.
    """

    path: Path | None = None
    records: list[AcceptedReport] = field(default_factory=list)
    rejections: list[dict[str, Any]] = field(default_factory=list)
    replay: ReplayIndex = field(default_factory=ReplayIndex)

    def __post_init__(self) -> None:
        self._fh = None
        if self.path is not None:
            self.path = Path(self.path)
            if self.path.exists():
                self._load()
            self._fh = open(self.path, "a", encoding="utf-8")

    @property
    def rejection_path(self) -> Path | None:
        return None if self.path is None else self.path.with_name(self.path.name + ".rejections")

    def _load(self) -> None:
        lines = self.path.read_text(encoding="utf-8").split("\n")
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = AcceptedReport(
                    IncidentReport.from_dict(d["report"]),
                    None if d["asset"] is None else (d["asset"][0], int(d["asset"][1])),
                    int(d["accepted_at"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, Rejection) as exc:
                if n == len(lines):
                    # an unterminated last line was never acknowledged
                    log.warning("dropping torn final record in %s", self.path)
                    continue
                raise StoreError(f"{self.path}:{n}: corrupt record ({exc})") from None
            self.records.append(rec)
            self.replay.add((rec.report.device_key_id, rec.report.nonce), rec.report.timestamp)

    def append(self, rec: AcceptedReport) -> None:
        """Caller must hold ``self.replay.lock``."""
        if self._fh is not None:
            line = json.dumps({
                "accepted_at": rec.accepted_at,
                "asset": list(rec.asset) if rec.asset else None,
                "report": rec.report.to_dict(),
            }, sort_keys=True, ensure_ascii=False)
            self._fh.write(line + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
        self.records.append(rec)
        self.replay.add((rec.report.device_key_id, rec.report.nonce), rec.report.timestamp)

    def reject(self, rej: Rejection, device_key_id: str | None, at: int) -> None:
        entry = {"at": at, "reason": rej.reason, "detail": rej.detail, "device_key_id": device_key_id}
        with self.replay.lock:
            self.rejections.append(entry)
            if self.rejection_path is not None:
                with open(self.rejection_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry) + "\n")
        log.info("rejected report from %s: %s %s", device_key_id, rej.reason, rej.detail)

    def snapshot(self) -> tuple[AcceptedReport, ...]:
        with self.replay.lock:
            return tuple(self.records)

    def close(self) -> None:
        if self._fh is not None:
            with self.replay.lock:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._fh.close()
                self._fh = None

    def __enter__(self) -> ReportStore:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def ingest(
    e: SignedEnvelope | bytes | str,
    reg: DeviceRegistry,
    store: ReportStore,
    spec: GridSpec,
    now: int | None = None,
    radius: float = DEFAULT_RADIUS_M,
    geo: GeoReference = DEFAULT_GEO,
) -> AcceptanceRecord:
    """Verify, map and durably store one submission.

    Rejections are logged in the store and re-raised for the caller.
    """
    now = now_ms() if now is None else now
    key_id = e.device_key_id if isinstance(e, SignedEnvelope) else None
    try:
        env = e if isinstance(e, SignedEnvelope) else SignedEnvelope.from_json(e)
        key_id = env.device_key_id
        report = verify(env, reg, now)
        asset = map_to_asset(report.location, spec, radius, geo)
        with store.replay.lock:
            nonce_key = (report.device_key_id, report.nonce)
            if nonce_key in store.replay:
                raise Replay(f"nonce {report.nonce} already used by {report.device_key_id}")
            store.append(AcceptedReport(report, asset, now))
            store.replay.prune(now)
    except Rejection as rej:
        store.reject(rej, key_id, now)
        raise
    return AcceptanceRecord(report.report_id, asset)
