"""Taint tracking over a simulated object graph and capsule installation.

Data flows are events ``(source, sink, operation)``. For ``read`` the sink
is the acting subject (it pulls data); for ``write``, ``ipc`` and
``export`` the source acts. An allowed event unions the moved labels into
the sink; a denied one changes nothing but the log.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from gridwatch.capsule.container import (
    Attestation,
    BadSignature,
    Capsule,
    KeyServer,
    decrypt_capsule,
)
from gridwatch.capsule.policy import (
    OPERATIONS,
    TIERS,
    CapsulePolicy,
    Decision,
    InstalledPolicy,
    check_access,
)

OBJECT_KINDS = ("file", "process", "ipc_message", "service_endpoint", "account", "network_sink")
MAX_LABEL = 2**32 - 1
_FORMAT = "gridwatch-taintdb"


class PolicyViolation(Exception):
    def __init__(self, decision: Decision, event: FlowEvent):
        self.decision = decision
        self.event = event
        super().__init__(f"{event.operation} {event.source} -> {event.sink} denied: {decision.reason}"
                         + (f" ({decision.capsule_id} rule {decision.rule_index})" if decision.capsule_id else ""))


class CorruptStore(RuntimeError):
    pass


@dataclass
class TaintObject:
    id: str
    kind: str
    labels: set[int] = field(default_factory=set)


@dataclass(frozen=True)
class FlowEvent:
    source: str
    sink: str
    operation: str
    tier: str | None = None
    context: frozenset[int] | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"source": self.source, "sink": self.sink, "operation": self.operation}
        if self.tier is not None:
            d["tier"] = self.tier
        if self.context is not None:
            d["context"] = sorted(self.context)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FlowEvent:
        ctx = d.get("context")
        return cls(d["source"], d["sink"], d["operation"], d.get("tier"),
                   None if ctx is None else frozenset(int(x) for x in ctx))


class ObjectGraph:
    def __init__(self) -> None:
        self.objects: dict[str, TaintObject] = {}
        self.edges: list[FlowEvent] = []

    def add(self, obj_id: str, kind: str) -> TaintObject:
        if kind not in OBJECT_KINDS:
            raise ValueError(f"object kind must be one of {OBJECT_KINDS}")
        if obj_id in self.objects:
            raise ValueError(f"object {obj_id!r} already exists")
        obj = self.objects[obj_id] = TaintObject(obj_id, kind)
        return obj

    def labels(self, obj_id: str) -> frozenset[int]:
        return frozenset(self.get(obj_id).labels)

    def get(self, obj_id: str) -> TaintObject:
        try:
            return self.objects[obj_id]
        except KeyError:
            raise KeyError(f"unknown object {obj_id!r}") from None


@dataclass
class TaintDatabase:
    """capsule_id -> tainted object ids, label registry, monotone event log."""

    tainted: dict[str, set[str]] = field(default_factory=dict)
    policies: dict[int, InstalledPolicy] = field(default_factory=dict)
    next_label: int = 1
    log: list[dict[str, Any]] = field(default_factory=list)

    def allocate_label(self) -> int:
        if self.next_label > MAX_LABEL:
            raise RuntimeError("taint label space exhausted")
        lab = self.next_label
        self.next_label += 1
        return lab

    def label_of(self, capsule_id: str) -> int | None:
        for lab, p in self.policies.items():
            if p.capsule_id == capsule_id:
                return lab
        return None


@dataclass(frozen=True)
class InstalledCapsule:
    capsule_id: str
    label: int
    object_ids: tuple[str, ...]
    payload: dict[str, bytes] = field(repr=False, default_factory=dict)


class TaintEngine:
    """Reference monitor: every flow goes through :meth:`propagate`."""

    def __init__(self, graph: ObjectGraph | None = None, db: TaintDatabase | None = None):
        self.graph = graph or ObjectGraph()
        self.db = db or TaintDatabase()
        self._lock = threading.Lock()

    # -- sources -----------------------------------------------------------

    def add_object(self, obj_id: str, kind: str) -> None:
        with self._lock:
            self.graph.add(obj_id, kind)

    def install_sources(self, capsule_id: str, policy: CapsulePolicy, objects: Iterable[tuple[str, str]]) -> int:
        """Register a capsule and mark its objects as sources of a fresh label."""
        objects = list(objects)
        with self._lock:
            if self.db.label_of(capsule_id) is not None:
                raise ValueError(f"capsule {capsule_id} already installed")
            for oid, kind in objects:
                if oid in self.graph.objects:
                    raise ValueError(f"object {oid!r} already exists")
                if kind not in OBJECT_KINDS:
                    raise ValueError(f"object kind must be one of {OBJECT_KINDS}")
            lab = self.db.allocate_label()
            self.db.policies[lab] = InstalledPolicy(capsule_id, lab, policy)
            self.db.tainted[capsule_id] = set()
            for oid, kind in objects:
                self.graph.add(oid, kind).labels.add(lab)
                self.db.tainted[capsule_id].add(oid)
            self.db.log.append({"type": "install", "capsule_id": capsule_id, "label": lab,
                                "objects": [oid for oid, _ in objects]})
            return lab

    # -- flows -------------------------------------------------------------

    def resolve(self, event: FlowEvent) -> tuple[str, frozenset[int], frozenset[int], frozenset[int]]:
        """(tier, subject labels, object labels, labels moved to the sink)."""
        if event.operation not in OPERATIONS:
            raise ValueError(f"operation must be one of {OPERATIONS}")
        src, snk = self.graph.get(event.source), self.graph.get(event.sink)
        tier = event.tier
        if tier is None:
            tier = "service" if "service_endpoint" in (src.kind, snk.kind) else "coarse"
        if tier not in TIERS:
            raise ValueError(f"tier must be one of {TIERS}")
        subject, obj = (snk, src) if event.operation == "read" else (src, snk)
        moved = frozenset(src.labels)
        if tier == "fine" and event.context is not None:
            if not event.context <= subject.labels:
                raise ValueError("fine-tier context must be a subset of the subject's labels")
            if event.operation != "read":
                moved = event.context
        return tier, frozenset(subject.labels), frozenset(obj.labels), moved

    def check(self, event: FlowEvent) -> Decision:
        tier, subj, obj, _ = self.resolve(event)
        return check_access(subj, obj, event.operation, tier, self.db.policies, event.context)

    def propagate(self, event: FlowEvent) -> Decision:
        """Apply one flow; raises :class:`PolicyViolation` with no state change on deny."""
        with self._lock:
            tier, subj, obj, moved = self.resolve(event)
            decision = check_access(subj, obj, event.operation, tier, self.db.policies, event.context)
            record = {"type": "flow", **event.to_dict(), "tier": tier, "verdict": decision.verdict,
                      "capsule_id": decision.capsule_id, "rule_index": decision.rule_index}
            if not decision.allowed:
                self.db.log.append(record)
                raise PolicyViolation(decision, event)
            sink = self.graph.get(event.sink)
            new = moved - sink.labels
            sink.labels |= new
            for lab in new:
                inst = self.db.policies.get(lab)
                if inst is not None:
                    self.db.tainted[inst.capsule_id].add(sink.id)
            self.graph.edges.append(event)
            self.db.log.append(record)
            return decision

    def run(self, events: Iterable[FlowEvent]) -> list[Decision]:
        out = []
        for ev in events:
            try:
                out.append(self.propagate(ev))
            except PolicyViolation as pv:
                out.append(pv.decision)
        return out

    # -- persistence -------------------------------------------------------

    def persist(self, path: str | Path) -> None:
        """Atomically write the graph, database and log as NDJSON."""
        path = Path(path)
        lines = [{"type": "header", "format": _FORMAT, "version": 1, "next_label": self.db.next_label}]
        with self._lock:
            for obj in sorted(self.graph.objects.values(), key=lambda o: o.id):
                lines.append({"type": "object", "id": obj.id, "kind": obj.kind, "labels": sorted(obj.labels)})
            for lab, inst in sorted(self.db.policies.items()):
                lines.append({"type": "capsule", "capsule_id": inst.capsule_id, "label": lab,
                              "policy": inst.policy.to_dict(),
                              "objects": sorted(self.db.tainted.get(inst.capsule_id, ()))})
            for ev in self.graph.edges:
                lines.append({"type": "edge", **ev.to_dict()})
            for entry in self.db.log:
                lines.append({"type": "log", "entry": entry})
        body = "".join(json.dumps(ln, sort_keys=True) + "\n" for ln in lines).encode()
        footer = json.dumps({"type": "footer", "count": len(lines),
                             "sha256": hashlib.sha256(body).hexdigest()}).encode() + b"\n"
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(body + footer)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    @classmethod
    def restore(cls, path: str | Path) -> TaintEngine:
        """Load a persisted engine; any damage raises :class:`CorruptStore`."""
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise CorruptStore(f"cannot read {path}: {exc}") from None
        if not raw.endswith(b"\n"):
            raise CorruptStore(f"{path}: truncated (no final newline)")
        body, _, last = raw[:-1].rpartition(b"\n")
        body = body + b"\n" if body else b""
        try:
            footer = json.loads(last)
            lines = [json.loads(ln) for ln in body.decode().splitlines()]
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CorruptStore(f"{path}: unparsable ({exc})") from None
        if not isinstance(footer, dict) or footer.get("type") != "footer":
            raise CorruptStore(f"{path}: missing footer")
        if footer.get("count") != len(lines) or footer.get("sha256") != hashlib.sha256(body).hexdigest():
            raise CorruptStore(f"{path}: checksum or record count mismatch")
        if not lines or lines[0].get("type") != "header" or lines[0].get("format") != _FORMAT:
            raise CorruptStore(f"{path}: bad header")

        eng = cls()
        try:
            next_label = int(lines[0]["next_label"])
            for ln in lines[1:]:
                t = ln["type"]
                if t == "object":
                    eng.graph.add(ln["id"], ln["kind"]).labels.update(int(x) for x in ln["labels"])
                elif t == "capsule":
                    lab = int(ln["label"])
                    eng.db.policies[lab] = InstalledPolicy(ln["capsule_id"], lab, CapsulePolicy.from_dict(ln["policy"]))
                    eng.db.tainted[ln["capsule_id"]] = set(ln["objects"])
                elif t == "edge":
                    eng.graph.edges.append(FlowEvent.from_dict(ln))
                elif t == "log":
                    eng.db.log.append(ln["entry"])
                else:
                    raise ValueError(f"unknown record type {t!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptStore(f"{path}: bad record ({exc})") from None
        top = max(eng.db.policies, default=0)
        eng.db.next_label = max(next_label, top + 1)
        return eng

    def snapshot(self) -> dict[str, Any]:
        """Observable state, for equality checks."""
        return {
            "objects": {o.id: (o.kind, sorted(o.labels)) for o in self.graph.objects.values()},
            "tainted": {k: sorted(v) for k, v in self.db.tainted.items()},
            "policies": {lab: (p.capsule_id, p.policy.to_dict()) for lab, p in self.db.policies.items()},
            "edges": [e.to_dict() for e in self.graph.edges],
            "log": list(self.db.log),
            "next_label": self.db.next_label,
        }


def install_capsule(
    capsule: Capsule,
    attestation: Attestation | None,
    engine: TaintEngine,
    keyserver: KeyServer,
    owners: Mapping[str, bytes],
) -> InstalledCapsule:
    """Verify, fetch the key, decrypt, and mark the payload as taint sources.

    Nothing is requested from the key server unless the owner signature holds.
    """
    owner_pub = owners.get(capsule.owner_id)
    if owner_pub is None or not capsule.verify_signature(owner_pub):
        raise BadSignature(f"capsule {capsule.capsule_id} signature does not verify for {capsule.owner_id!r}")
    key_id, key = keyserver.release_key(capsule.capsule_id, attestation)
    if key_id != capsule.key_id:
        raise BadSignature("key id mismatch between capsule and key server")
    objects = decrypt_capsule(capsule, key)
    ids = tuple(f"{capsule.capsule_id}/{name}" for name, _ in objects)
    label = engine.install_sources(capsule.capsule_id, capsule.policy, [(oid, "file") for oid in ids])
    return InstalledCapsule(capsule.capsule_id, label, ids, dict(objects))
