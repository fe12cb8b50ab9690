"""Capsule policies and the access decision function.

A policy is an ordered rule list evaluated first-match with deny as the
default. Label patterns name capsules, not raw labels, because labels are
only allocated at install time: ``"self"`` is the policy's own capsule and
any other string is another capsule's id.

An access involves every installed capsule whose label appears on either
side. Each involved policy decides on its own; any deny wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping

OPERATIONS = ("read", "write", "ipc", "export")
TIERS = ("coarse", "fine", "service")
VERDICTS = ("allow", "deny")


@dataclass(frozen=True)
class LabelPattern:
    """Predicate over a label set. The empty pattern matches anything."""

    has: tuple[str, ...] = ()
    lacks: tuple[str, ...] = ()
    foreign: bool | None = None  # some label not owned by this capsule
    empty: bool | None = None

    def matches(self, labels: frozenset[int], own: int, label_of: Mapping[str, int]) -> bool:
        def resolve(ref: str) -> int | None:
            return own if ref == "self" else label_of.get(ref)

        for ref in self.has:
            lab = resolve(ref)
            if lab is None or lab not in labels:
                return False
        for ref in self.lacks:
            lab = resolve(ref)
            if lab is not None and lab in labels:
                return False
        if self.foreign is not None and any(lab != own for lab in labels) != self.foreign:
            return False
        if self.empty is not None and (not labels) != self.empty:
            return False
        return True

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {}
        if self.has:
            d["has"] = list(self.has)
        if self.lacks:
            d["lacks"] = list(self.lacks)
        if self.foreign is not None:
            d["foreign"] = self.foreign
        if self.empty is not None:
            d["empty"] = self.empty
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> LabelPattern:
        unknown = set(d) - {"has", "lacks", "foreign", "empty"}
        if unknown:
            raise ValueError(f"unknown pattern keys {sorted(unknown)}")
        return cls(tuple(d.get("has", ())), tuple(d.get("lacks", ())), d.get("foreign"), d.get("empty"))


ANY = LabelPattern()


@dataclass(frozen=True)
class Rule:
    subject: LabelPattern
    object: LabelPattern
    operation: str
    verdict: str

    def __post_init__(self) -> None:
        if self.operation not in OPERATIONS:
            raise ValueError(f"operation must be one of {OPERATIONS}")
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")

    def to_dict(self) -> dict[str, Any]:
        return {"subject": self.subject.to_dict(), "object": self.object.to_dict(),
                "operation": self.operation, "verdict": self.verdict}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Rule:
        return cls(LabelPattern.from_dict(d.get("subject", {})), LabelPattern.from_dict(d.get("object", {})),
                   d["operation"], d["verdict"])


@dataclass(frozen=True)
class CapsulePolicy:
    rules: tuple[Rule, ...] = ()
    default_verdict: str = field(default="deny", init=False)

    def first_match(
        self, subject: frozenset[int], obj: frozenset[int], operation: str, own: int, label_of: Mapping[str, int]
    ) -> tuple[int, Rule] | None:
        for i, rule in enumerate(self.rules):
            if (rule.operation == operation
                    and rule.subject.matches(subject, own, label_of)
                    and rule.object.matches(obj, own, label_of)):
                return i, rule
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"default_verdict": self.default_verdict, "rules": [r.to_dict() for r in self.rules]}

    def canonical_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CapsulePolicy:
        if d.get("default_verdict", "deny") != "deny":
            raise ValueError("default_verdict is always deny")
        return cls(tuple(Rule.from_dict(r) for r in d.get("rules", ())))


@dataclass(frozen=True)
class InstalledPolicy:
    capsule_id: str
    label: int
    policy: CapsulePolicy


@dataclass(frozen=True)
class Decision:
    allowed: bool
    tier: str
    reason: str
    capsule_id: str | None = None
    rule_index: int | None = None
    rule: Rule | None = None
    involved: tuple[str, ...] = ()

    @property
    def verdict(self) -> str:
        return "allow" if self.allowed else "deny"

    def to_dict(self) -> dict[str, Any]:
        return {"verdict": self.verdict, "tier": self.tier, "reason": self.reason,
                "capsule_id": self.capsule_id, "rule_index": self.rule_index,
                "involved": list(self.involved)}


def check_access(
    subject_labels: frozenset[int],
    object_labels: frozenset[int],
    operation: str,
    tier: str,
    policies: Mapping[int, InstalledPolicy],
    context_labels: frozenset[int] | None = None,
) -> Decision:
    """Decide one access.

    ``coarse`` judges the subject by its whole label set (a process is the
    union of everything it has read). ``fine`` judges by ``context_labels``,
    the labels of the particular in-process data doing the access, when
    given. ``service`` mediates shared aggregation endpoints and uses the
    sets as passed.
    """
    if operation not in OPERATIONS:
        raise ValueError(f"operation must be one of {OPERATIONS}")
    if tier not in TIERS:
        raise ValueError(f"tier must be one of {TIERS}")
    subject = frozenset(context_labels) if tier == "fine" and context_labels is not None else frozenset(subject_labels)
    obj = frozenset(object_labels)
    involved = sorted(lab for lab in subject | obj if lab in policies)
    if not involved:
        return Decision(True, tier, "no policy involved")
    label_of = {p.capsule_id: lab for lab, p in policies.items()}
    names = tuple(policies[lab].capsule_id for lab in involved)
    first_allow: tuple[str, int, Rule] | None = None
    for lab in involved:
        inst = policies[lab]
        hit = inst.policy.first_match(subject, obj, operation, lab, label_of)
        if hit is None:
            return Decision(False, tier, "default deny", inst.capsule_id, involved=names)
        idx, rule = hit
        if rule.verdict == "deny":
            return Decision(False, tier, "rule deny", inst.capsule_id, idx, rule, names)
        if first_allow is None:
            first_allow = (inst.capsule_id, idx, rule)
    cid, idx, rule = first_allow
    return Decision(True, tier, "rule allow", cid, idx, rule, names)
