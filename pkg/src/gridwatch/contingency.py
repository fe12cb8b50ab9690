"""Probability-screened contingency analysis.

Field reports become per-asset failure probabilities (noisy-OR), outage
hypotheses are ranked by the product of their members' probabilities, and
only the ones that clear the screening policy are re-solved. Contingency
probability assumes independent asset failures.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from gridwatch.grid import GridSpec, apply_outage, connectivity, drop_buses
from gridwatch.powerflow import Controls, Converged, SolveOptions, line_flows, solve_newton

SEVERITY_MAX = 10.0
Element = tuple[str, int]


@dataclass(frozen=True, order=True)
class Contingency:
    elements: tuple[Element, ...]

    def __post_init__(self) -> None:
        elems = tuple(sorted(set(self.elements)))
        if not elems:
            raise ValueError("contingency needs at least one element")
        if len(elems) != len(self.elements):
            raise ValueError("duplicate elements in contingency")
        for kind, _ in elems:
            if kind not in ("branch", "generator"):
                raise ValueError(f"unknown element kind {kind!r}")
        object.__setattr__(self, "elements", elems)

    @classmethod
    def of(cls, *elements: Element) -> Contingency:
        return cls(tuple(elements))

    @property
    def order(self) -> int:
        return len(self.elements)

    def label(self) -> str:
        return "+".join(f"{'B' if k == 'branch' else 'G'}{i}" for k, i in self.elements)


@dataclass(frozen=True)
class ScreeningPolicy:
    floor: float = 0.001
    threshold: float = 1e-4
    budget: int | None = None  # None = unlimited
    max_order: int = 2

    def __post_init__(self) -> None:
        if not 0.0 <= self.floor <= 1.0:
            raise ValueError("floor must be in [0, 1]")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.max_order < 1:
            raise ValueError("max_order must be >= 1")


@dataclass(frozen=True)
class AssetProbability:
    probs: dict[Element, float]
    provenance: dict[Element, tuple[str, ...]] = field(default_factory=dict)
    floor: float = 0.001

    def __getitem__(self, element: Element) -> float:
        return self.probs.get(element, self.floor)


@dataclass(frozen=True)
class SeverityScore:
    value: float
    unsolvable: bool = False
    worst_branch: int | None = None

    def __post_init__(self) -> None:
        if self.unsolvable and self.value != SEVERITY_MAX:
            raise ValueError("unsolvable severity must equal SEVERITY_MAX")
        if self.value < 0:
            raise ValueError("severity must be >= 0")


@dataclass(frozen=True)
class AssessedContingency:
    contingency: Contingency
    probability: float
    severity: SeverityScore

    @property
    def expected_severity(self) -> float:
        return self.probability * self.severity.value


@dataclass(frozen=True)
class RiskAssessment:
    entries: tuple[AssessedContingency, ...]
    bus_risk: dict[int, float]

    def ranked(self) -> list[AssessedContingency]:
        """Severity descending, then probability descending, then element order."""
        return sorted(self.entries, key=lambda e: (-e.severity.value, -e.probability, e.contingency.elements))


class MappedReport(Protocol):
    report_id: str
    confidence: float
    asset: Element | None


def enumerate_contingencies(spec: GridSpec, x: int) -> list[Contingency]:
    """All order-``x`` outages of in-service branches and generators."""
    if x < 1:
        raise ValueError("order must be >= 1")
    elements = spec.outageable()
    return [Contingency(combo) for combo in itertools.combinations(elements, x)]


def derive_probabilities(
    reports: Iterable[MappedReport], spec: GridSpec, floor: float = 0.001
) -> AssetProbability:
    survive: dict[Element, float] = {}
    prov: dict[Element, list[str]] = {}
    for rep in reports:
        if rep.asset is None:
            continue
        asset = (rep.asset[0], int(rep.asset[1]))
        survive[asset] = survive.get(asset, 1.0) * (1.0 - rep.confidence)
        prov.setdefault(asset, []).append(rep.report_id)
    probs = {el: floor for el in spec.outageable()}
    for asset, s in survive.items():
        probs[asset] = 1.0 - s
    return AssetProbability(probs, {k: tuple(v) for k, v in prov.items()}, floor)


def contingency_probability(c: Contingency, probs: AssetProbability) -> float:
    return math.prod(probs[el] for el in c.elements)


def screen(
    candidates: Sequence[Contingency], probs: AssetProbability, policy: ScreeningPolicy
) -> list[tuple[Contingency, float]]:
    scored = [(c, contingency_probability(c, probs)) for c in candidates]
    kept = [(c, p) for c, p in scored if p >= policy.threshold]
    kept.sort(key=lambda cp: (-cp[1], cp[0].elements))
    if policy.budget is not None:
        kept = kept[: policy.budget]
    return kept


def _loaded_buses(spec: GridSpec) -> set[int]:
    return {ld.bus for ld in spec.loads if ld.p != 0.0 or ld.q != 0.0}


def assess(
    spec: GridSpec, c: Contingency, u: Controls | None = None, opts: SolveOptions | None = None
) -> SeverityScore:
    post = apply_outage(spec, c)
    slack = post.slack_bus.id
    dead = [b for isl in connectivity(post) if slack not in isl for b in isl]
    if dead:
        if _loaded_buses(post) & set(dead):
            return SeverityScore(SEVERITY_MAX, unsolvable=True)
        # islands with nothing to serve are simply de-energised
        post = drop_buses(post, dead)
    outcome = solve_newton(post, u, opts)
    if not isinstance(outcome, Converged):
        return SeverityScore(SEVERITY_MAX, unsolvable=True)
    flows = [f for f, br in zip(line_flows(outcome.state, post), post.branches) if br.in_service]
    if not flows:
        return SeverityScore(0.0)
    worst = max(flows, key=lambda f: (f.loading, -f.branch_id))
    return SeverityScore(worst.loading, worst_branch=worst.branch_id)


def assess_all(
    spec: GridSpec,
    contingencies: Sequence[Contingency],
    u: Controls | None = None,
    opts: SolveOptions | None = None,
    workers: int = 1,
) -> list[SeverityScore]:
    """Assess in input order; ``workers > 1`` runs solves on a thread pool."""
    if workers <= 1:
        return [assess(spec, c, u, opts) for c in contingencies]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: assess(spec, c, u, opts), contingencies))


def bus_risk(entries: Iterable[AssessedContingency], spec: GridSpec) -> dict[int, float]:
    risk = {b.id: 0.0 for b in spec.buses}
    for e in entries:
        touched: set[int] = set()
        for el in e.contingency.elements:
            touched.update(spec.incident_buses(el))
        for b in touched:
            risk[b] += e.expected_severity
    return risk


def build_assessment(
    spec: GridSpec, screened: Sequence[tuple[Contingency, float]], scores: Sequence[SeverityScore]
) -> RiskAssessment:
    entries = tuple(AssessedContingency(c, p, s) for (c, p), s in zip(screened, scores, strict=True))
    return RiskAssessment(entries, bus_risk(entries, spec))


def analyze(
    spec: GridSpec,
    probs: AssetProbability,
    policy: ScreeningPolicy,
    *,
    exhaustive: bool = False,
    u: Controls | None = None,
    opts: SolveOptions | None = None,
    workers: int = 1,
) -> RiskAssessment:
    """Enumerate up to ``policy.max_order``, screen (unless exhaustive), assess."""
    candidates: list[Contingency] = []
    for x in range(1, policy.max_order + 1):
        candidates.extend(enumerate_contingencies(spec, x))
    if exhaustive:
        selected = [(c, contingency_probability(c, probs)) for c in candidates]
    else:
        selected = screen(candidates, probs, policy)
    scores = assess_all(spec, [c for c, _ in selected], u, opts, workers)
    return build_assessment(spec, selected, scores)
