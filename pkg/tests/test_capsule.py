from __future__ import annotations

import random
from dataclasses import replace

import pytest

from gridwatch.capsule import (
    BadSignature,
    Capsule,
    CapsuleFormatError,
    CapsulePolicy,
    CorruptStore,
    DigestMismatch,
    FlowEvent,
    KeyDenied,
    KeyServer,
    LabelPattern,
    NotFound,
    OwnerKey,
    PolicyViolation,
    Rule,
    TaintEngine,
    check_access,
    decrypt_capsule,
    install_capsule,
    package_capsule,
    release_key,
)
from gridwatch.capsule.script import simulate
from capsule_cases import monitor_for, random_case, replay_monitor
from oracles import audit_network_sinks

ALLOW_READ = CapsulePolicy((Rule(LabelPattern(), LabelPattern(), "read", "allow"),))


@pytest.fixture
def owner():
    return OwnerKey.generate("utility")


@pytest.fixture
def ks():
    return KeyServer()


def attested(ks):
    return ks.attest(b"phone-model-x/os-1.2")


# -- packaging and key release ---------------------------------------------------------

def test_package_release_round_trip(owner, ks):
    cap = package_capsule({"a.txt": b"hello", "b.bin": b"\x00\x01"}, ALLOW_READ, owner, ks)
    key = release_key(cap.capsule_id, attested(ks), ks)
    assert dict(decrypt_capsule(cap, key)) == {"a.txt": b"hello", "b.bin": b"\x00\x01"}


def test_flipped_token_denied(owner, ks):
    cap = package_capsule({"a": b"x"}, ALLOW_READ, owner, ks)
    att = attested(ks)
    bad = replace(att, token=bytes([att.token[0] ^ 1]) + att.token[1:])
    with pytest.raises(KeyDenied):
        release_key(cap.capsule_id, bad, ks)
    with pytest.raises(DigestMismatch):
        decrypt_capsule(cap, bytes(32))


def test_unknown_capsule(ks):
    with pytest.raises(NotFound):
        release_key("nope", attested(ks), ks)


def test_attestation_can_be_disabled(owner):
    ks = KeyServer(require_attestation=False)
    cap = package_capsule({"a": b"x"}, ALLOW_READ, owner, ks)
    assert release_key(cap.capsule_id, None, ks)


def test_identical_payloads_distinct(owner, ks):
    a = package_capsule({"a": b"x"}, ALLOW_READ, owner, ks)
    b = package_capsule({"a": b"x"}, ALLOW_READ, owner, ks)
    assert a.capsule_id != b.capsule_id
    assert ks.keys[a.capsule_id] != ks.keys[b.capsule_id]


def test_container_round_trip_and_damage(owner, ks):
    cap = package_capsule({"a": b"x"}, ALLOW_READ, owner, ks)
    blob = cap.to_bytes()
    assert blob[:4] == b"EYC1" and blob[4] == 1
    assert Capsule.from_bytes(blob) == cap
    for bad in (b"NOPE" + blob[4:], blob[:4] + b"\x09" + blob[5:], blob[:-1], blob + b"x"):
        with pytest.raises(CapsuleFormatError):
            Capsule.from_bytes(bad)


# -- installation -------------------------------------------------------------------------

def test_install_marks_sources(owner, ks):
    cap = package_capsule({"a": b"1", "b": b"2"}, ALLOW_READ, owner, ks)
    eng = TaintEngine()
    inst = install_capsule(cap, attested(ks), eng, ks, {"utility": owner.public_bytes()})
    for oid in inst.object_ids:
        assert eng.graph.labels(oid) == {inst.label}
    assert eng.db.tainted[cap.capsule_id] == set(inst.object_ids)


def test_bad_signature_no_key_request(owner, ks):
    cap = package_capsule({"a": b"1"}, ALLOW_READ, owner, ks)
    forged = replace(cap, signature=bytes(64))
    eng = TaintEngine()
    before = eng.snapshot()
    with pytest.raises(BadSignature):
        install_capsule(forged, attested(ks), eng, ks, {"utility": owner.public_bytes()})
    assert ks.requests == []
    assert eng.snapshot() == before


def test_tampered_policy_breaks_signature(owner, ks):
    cap = package_capsule({"a": b"1"}, CapsulePolicy(), owner, ks)
    swapped = replace(cap, policy=ALLOW_READ)
    with pytest.raises(BadSignature):
        install_capsule(swapped, attested(ks), TaintEngine(), ks, {"utility": owner.public_bytes()})
    assert ks.requests == []


def test_install_without_attestation_denied(owner, ks):
    cap = package_capsule({"a": b"1"}, ALLOW_READ, owner, ks)
    eng = TaintEngine()
    with pytest.raises(KeyDenied):
        install_capsule(cap, None, eng, ks, {"utility": owner.public_bytes()})
    assert eng.graph.objects == {}


def test_two_installs_distinct_labels(owner, ks):
    eng = TaintEngine()
    owners = {"utility": owner.public_bytes()}
    a = install_capsule(package_capsule({"a": b"1"}, ALLOW_READ, owner, ks), attested(ks), eng, ks, owners)
    b = install_capsule(package_capsule({"a": b"1"}, ALLOW_READ, owner, ks), attested(ks), eng, ks, owners)
    assert a.label != b.label


# -- propagation and access -----------------------------------------------------------------

def test_read_taints_process():
    eng = TaintEngine()
    lab = eng.install_sources("A", ALLOW_READ, [("doc", "file")])
    eng.add_object("app", "process")
    eng.propagate(FlowEvent("doc", "app", "read"))
    assert eng.graph.labels("app") == {lab}
    assert "app" in eng.db.tainted["A"]


def test_write_unions_labels():
    allow_write = CapsulePolicy((Rule(LabelPattern(), LabelPattern(), "write", "allow"),))
    eng = TaintEngine()
    a = eng.install_sources("A", allow_write, [("proc", "process")])
    b = eng.install_sources("B", allow_write, [("obj", "file")])
    eng.propagate(FlowEvent("proc", "obj", "write"))
    assert eng.graph.labels("obj") == {a, b}


def test_export_default_deny_no_mutation():
    eng = TaintEngine()
    eng.install_sources("A", ALLOW_READ, [("doc", "file")])
    eng.add_object("net", "network_sink")
    before = eng.snapshot()
    with pytest.raises(PolicyViolation) as exc:
        eng.propagate(FlowEvent("doc", "net", "export"))
    assert exc.value.decision.reason == "default deny"
    after = eng.snapshot()
    assert after["log"][:-1] == before["log"] and after["log"][-1]["verdict"] == "deny"
    assert {k: v for k, v in after.items() if k != "log"} == {k: v for k, v in before.items() if k != "log"}


def test_unlabeled_access_allowed():
    d = check_access(frozenset(), frozenset(), "read", "coarse", {})
    assert d.allowed and d.reason == "no policy involved"


def test_tier_divergence():
    deny_mixed = CapsulePolicy((
        Rule(LabelPattern(has=("self",)), LabelPattern(lacks=("self",)), "read", "deny"),
        Rule(LabelPattern(), LabelPattern(), "read", "allow"),
    ))
    eng = TaintEngine()
    a = eng.install_sources("A", ALLOW_READ, [("a.txt", "file")])
    b = eng.install_sources("B", deny_mixed, [("b.txt", "file")])
    eng.add_object("app", "process")
    eng.propagate(FlowEvent("a.txt", "app", "read"))
    eng.propagate(FlowEvent("b.txt", "app", "read"))
    assert eng.graph.labels("app") == {a, b}
    coarse = eng.check(FlowEvent("a.txt", "app", "read", tier="coarse"))
    fine = eng.check(FlowEvent("a.txt", "app", "read", tier="fine", context=frozenset({a})))
    assert not coarse.allowed and coarse.capsule_id == "B"
    assert fine.allowed


def test_conflict_resolves_to_deny():
    eng = TaintEngine()
    deny_all = CapsulePolicy((Rule(LabelPattern(), LabelPattern(), "write", "deny"),))
    allow_all = CapsulePolicy((Rule(LabelPattern(), LabelPattern(), "write", "allow"),))
    eng.install_sources("A", allow_all, [("p", "process")])
    eng.install_sources("B", deny_all, [("f", "file")])
    assert not eng.check(FlowEvent("p", "f", "write")).allowed


def test_fine_context_must_be_held():
    eng = TaintEngine()
    eng.install_sources("A", ALLOW_READ, [("doc", "file")])
    eng.add_object("app", "process")
    with pytest.raises(ValueError):
        eng.check(FlowEvent("app", "doc", "write", tier="fine", context=frozenset({1})))


def test_unknown_object():
    with pytest.raises(KeyError):
        TaintEngine().propagate(FlowEvent("x", "y", "read"))


def test_random_scripts_match_reference_monitor():
    r = random.Random(7)
    for _ in range(15):
        doc = random_case(r, n_events=400)
        eng, steps = simulate(doc)
        mon, verdicts = replay_monitor(doc)
        assert [s.decision.verdict for s in steps] == verdicts
        assert {o: set(eng.graph.labels(o)) for o in eng.graph.objects} == mon.labels
        assert audit_network_sinks(monitor_for(doc), [e.to_dict() for e in eng.graph.edges]) == []


def test_labels_never_shrink():
    r = random.Random(11)
    doc = random_case(r, n_events=300)
    from gridwatch.capsule.script import load_script

    eng, events = load_script(doc)
    prev = {o: eng.graph.labels(o) for o in eng.graph.objects}
    for ev in events:
        eng.run([ev])
        now = {o: eng.graph.labels(o) for o in eng.graph.objects}
        assert all(prev[o] <= now[o] for o in prev)
        prev = now


# -- persistence ------------------------------------------------------------------------------

def test_persist_restore_round_trip(tmp_path):
    eng, _ = simulate(random_case(random.Random(3), n_events=200))
    path = tmp_path / "taint.ndjson"
    eng.persist(path)
    again = TaintEngine.restore(path)
    assert again.snapshot() == eng.snapshot()


def test_label_after_restore(tmp_path):
    eng = TaintEngine()
    for name in "ABC":
        eng.install_sources(name, ALLOW_READ, [(f"{name}.txt", "file")])
    path = tmp_path / "t.ndjson"
    eng.persist(path)
    again = TaintEngine.restore(path)
    new = again.install_sources("D", ALLOW_READ, [("D.txt", "file")])
    assert new > max(eng.db.policies)


@pytest.mark.parametrize("damage", ["truncate", "flip", "empty", "missing"])
def test_damaged_store_fails_closed(tmp_path, damage):
    eng, _ = simulate(random_case(random.Random(4), n_events=50))
    path = tmp_path / "t.ndjson"
    eng.persist(path)
    raw = path.read_bytes()
    if damage == "truncate":
        path.write_bytes(raw[: len(raw) // 2])
    elif damage == "flip":
        i = len(raw) // 3
        path.write_bytes(raw[:i] + bytes([raw[i] ^ 0x20]) + raw[i + 1:])
    elif damage == "empty":
        path.write_bytes(b"")
    else:
        path.unlink()
    with pytest.raises(CorruptStore):
        TaintEngine.restore(path)
