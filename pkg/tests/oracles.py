"""Independent reference implementations used as test oracles.

Nothing here imports the code paths it checks: the mismatch oracle loops
over branches directly instead of using the assembled admittance matrix,
and the reference monitor evaluates policies from their JSON form.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np


# -- power flow ----------------------------------------------------------------

def dense_ybus(spec) -> list[list[complex]]:
    """Y-bus assembled entry by entry with plain Python complex numbers."""
    ids = [b.id for b in spec.buses]
    n = len(ids)
    y = [[0j] * n for _ in range(n)]
    for br in spec.branches:
        if not br.in_service:
            continue
        i, k = ids.index(br.from_bus), ids.index(br.to_bus)
        ys = 1 / complex(br.r, br.x)
        y[i][i] += ys + 0.5j * br.b_shunt
        y[k][k] += ys + 0.5j * br.b_shunt
        y[i][k] -= ys
        y[k][i] -= ys
    return y


def mismatch_bruteforce(v, theta, p_gen, q_gen, spec) -> tuple[list[float], list[float]]:
    """Straight double loop over all bus pairs, no sparsity shortcuts."""
    ids = [b.id for b in spec.buses]
    n = len(ids)
    y = dense_ybus(spec)
    pg = [0.0] * n
    qg = [0.0] * n
    pl = [0.0] * n
    ql = [0.0] * n
    for j, g in enumerate(spec.generators):
        if g.in_service:
            pg[ids.index(g.bus)] += p_gen[j]
            qg[ids.index(g.bus)] += q_gen[j]
    for ld in spec.loads:
        pl[ids.index(ld.bus)] += ld.p
        ql[ids.index(ld.bus)] += ld.q
    fp, fq = [], []
    for i in range(n):
        sp = sq = 0.0
        for k in range(n):
            g_ik, b_ik = y[i][k].real, y[i][k].imag
            t = theta[i] - theta[k]
            sp += v[i] * v[k] * (g_ik * math.cos(t) + b_ik * math.sin(t))
            sq += v[i] * v[k] * (g_ik * math.sin(t) - b_ik * math.cos(t))
        fp.append(-pg[i] + pl[i] + sp)
        fq.append(-qg[i] + ql[i] + sq)
    return fp, fq


def fd_jacobian(residual, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``residual`` (vector -> vector) at ``x0``."""
    f0 = residual(x0)
    jac = np.zeros((len(f0), len(x0)))
    for j in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        jac[:, j] = (residual(xp) - residual(xm)) / (2 * h)
    return jac


def two_bus_solution(x: float, p_load: float, v1: float = 1.0) -> tuple[float, float]:
    """High-voltage root of the lossless two-bus case with Q_load = 0.

    Real balance: p = (V1 V2 / x) sin(-t); reactive balance with Q = 0
    gives V2 = V1 cos t. Together: sin(2t) = -2 p x / V1^2.
    """
    theta = -0.5 * math.asin(2 * p_load * x / v1**2)
    return v1 * math.cos(theta), theta


def reachable_islands(spec) -> list[tuple[int, ...]]:
    """Islands by repeated relaxation over the in-service edge list."""
    comp = {b.id: b.id for b in spec.buses}
    changed = True
    while changed:
        changed = False
        for br in spec.branches:
            if not br.in_service:
                continue
            a, b = comp[br.from_bus], comp[br.to_bus]
            if a != b:
                lo = min(a, b)
                for k, c in comp.items():
                    if c in (a, b) and c != lo:
                        comp[k] = lo
                changed = True
    groups: dict[int, list[int]] = {}
    for k, c in comp.items():
        groups.setdefault(c, []).append(k)
    return sorted(tuple(sorted(g)) for g in groups.values())


def all_subsets(elements, x):
    return [tuple(c) for c in combinations(sorted(elements), x)]


# -- reference monitor -----------------------------------------------------------

def _pattern_ok(pat: dict, labels: set, own: int, names: dict) -> bool:
    def ref(r):
        return own if r == "self" else names.get(r)

    if any(ref(r) is None or ref(r) not in labels for r in pat.get("has", [])):
        return False
    if any(ref(r) is not None and ref(r) in labels for r in pat.get("lacks", [])):
        return False
    if "foreign" in pat:
        has_foreign = len([lab for lab in labels if lab != own]) > 0
        if has_foreign != pat["foreign"]:
            return False
    if "empty" in pat and (len(labels) == 0) != pat["empty"]:
        return False
    return True


class NaiveMonitor:
    """Plain-list reference monitor with the same flow semantics as the engine.

    Read: the sink acts and pulls the source's labels. Write/ipc/export: the
    source acts and pushes its labels (or, at the fine tier, only the given
    context). Each capsule whose label is involved picks its first matching
    rule; no match means deny; any deny wins.
    """

    def __init__(self):
        self.kind: dict[str, str] = {}
        self.labels: dict[str, set] = {}
        self.capsules: list[tuple[int, str, list]] = []  # (label, name, rules)
        self.next_label = 1
        self.allowed_log: list[dict] = []

    def install(self, name: str, policy: dict, objects) -> int:
        lab = self.next_label
        self.next_label += 1
        self.capsules.append((lab, name, list(policy.get("rules", []))))
        for oid, kind in objects:
            self.kind[oid] = kind
            self.labels[oid] = {lab}
        return lab

    def add(self, oid: str, kind: str) -> None:
        self.kind[oid] = kind
        self.labels[oid] = set()

    def label_of(self, name: str) -> int:
        return next(lab for lab, n, _ in self.capsules if n == name)

    def decide(self, subj: set, obj: set, op: str) -> tuple[str, dict]:
        names = {n: lab for lab, n, _ in self.capsules}
        per_capsule = {}
        verdict = "allow"
        for lab, name, rules in sorted(self.capsules):
            if lab not in subj and lab not in obj:
                continue
            hit = None
            for rule in rules:
                if (rule["operation"] == op
                        and _pattern_ok(rule.get("subject", {}), subj, lab, names)
                        and _pattern_ok(rule.get("object", {}), obj, lab, names)):
                    hit = rule
                    break
            per_capsule[lab] = hit
            if hit is None or hit["verdict"] == "deny":
                verdict = "deny"
        return verdict, per_capsule

    def step(self, ev: dict) -> str:
        src, snk, op = ev["source"], ev["sink"], ev["operation"]
        tier = ev.get("tier")
        if tier is None:
            tier = "service" if "service_endpoint" in (self.kind[src], self.kind[snk]) else "coarse"
        subject, other = (snk, src) if op == "read" else (src, snk)
        subj = set(self.labels[subject])
        obj = set(self.labels[other])
        moved = set(self.labels[src])
        ctx = ev.get("context")
        if tier == "fine" and ctx is not None:
            subj = set(ctx)
            if op != "read":
                moved = set(ctx)
        verdict, per_capsule = self.decide(subj, obj, op)
        if verdict == "allow":
            added = moved - self.labels[snk]
            self.labels[snk] |= moved
            self.allowed_log.append({**ev, "added": added, "moved": moved, "per_capsule": per_capsule})
        return verdict


def audit_network_sinks(mon: NaiveMonitor, edges) -> list[str]:
    """Replay allowed flows on a freshly set-up ``mon``.

    Every label that reaches a ``network_sink`` must be carried by a flow for
    which that label's own capsule matched an explicit allow rule. Returns
    one message per violation.
    """
    problems = []
    for n, ev in enumerate(edges):
        before = len(mon.allowed_log)
        verdict = mon.step(ev)
        if verdict != "allow":
            problems.append(f"edge {n}: logged as allowed but policy says deny")
            continue
        rec = mon.allowed_log[before]
        if mon.kind[ev["sink"]] != "network_sink":
            continue
        for lab in sorted(rec["moved"]):
            hit = rec["per_capsule"].get(lab)
            if hit is None or hit["verdict"] != "allow":
                problems.append(f"edge {n}: label {lab} reached {ev['sink']} without explicit allow")
    return problems
