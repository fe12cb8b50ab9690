"""Event scripts for ``gridwatch capsule simulate``.

A script is JSON::

    {"capsules": [{"id": "A", "policy": {"rules": [...]}, "objects": [["a.txt", "file"]]}],
     "objects":  [["app", "process"], ["net", "network_sink"]],
     "events":   [{"source": "a.txt", "sink": "app", "operation": "read",
                   "tier": "fine", "context": ["A"]}]}

``context`` names capsules; it is translated to their labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

from gridwatch.capsule.policy import CapsulePolicy, Decision
from gridwatch.capsule.taint import FlowEvent, PolicyViolation, TaintEngine


@dataclass(frozen=True)
class Step:
    index: int
    event: FlowEvent
    decision: Decision

    def line(self) -> str:
        ev = self.event
        where = f" [{self.decision.capsule_id} rule {self.decision.rule_index}]" if self.decision.capsule_id else ""
        return (f"{self.index:4d} {ev.operation:<6} {ev.source} -> {ev.sink} "
                f"({self.decision.tier}): {self.decision.verdict.upper()} {self.decision.reason}{where}")


def load_script(doc: dict[str, Any]) -> tuple[TaintEngine, list[FlowEvent]]:
    eng = TaintEngine()
    for cap in doc.get("capsules", []):
        eng.install_sources(cap["id"], CapsulePolicy.from_dict(cap.get("policy", {})),
                            [tuple(o) for o in cap.get("objects", [])])
    for oid, kind in doc.get("objects", []):
        eng.add_object(oid, kind)
    events = []
    for ev in doc.get("events", []):
        ctx = ev.get("context")
        if ctx is not None:
            labels = []
            for name in ctx:
                lab = eng.db.label_of(name)
                if lab is None:
                    raise ValueError(f"context names unknown capsule {name!r}")
                labels.append(lab)
            ctx = frozenset(labels)
        events.append(FlowEvent(ev["source"], ev["sink"], ev["operation"], ev.get("tier"), ctx))
    return eng, events


def simulate(doc: dict[str, Any] | str) -> tuple[TaintEngine, list[Step]]:
    if isinstance(doc, str):
        doc = json.loads(doc)
    eng, events = load_script(doc)
    steps = []
    for i, ev in enumerate(events):
        try:
            dec = eng.propagate(ev)
        except PolicyViolation as pv:
            dec = pv.decision
        steps.append(Step(i, ev, dec))
    return eng, steps
