"""Network description: parsing, validation, admittance assembly, outages.

Grid files are JSON. Impedances (``r``, ``x``, ``b_shunt``) are given in
per-unit already; powers (``p_set``, ``q_min``, ``q_max``, load ``p``/``q``)
and branch ``rating`` are given in MW / MVAr / MVA and divided by
``base_mva`` here. Nothing downstream of :func:`parse_grid` converts units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Iterable

import numpy as np

if TYPE_CHECKING:
    from gridwatch.contingency import Contingency

BUS_KINDS = ("slack", "pv", "pq")
ELEMENT_KINDS = ("branch", "generator")


class GridError(ValueError):
    """Invalid grid description."""


class GridParseError(GridError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


class UnknownBusError(GridError):
    def __init__(self, bus_id: int, context: str = ""):
        self.bus_id = bus_id
        super().__init__(f"unknown bus id {bus_id}" + (f" referenced by {context}" if context else ""))


class UnknownElementError(GridError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    voltage_setpoint: float | None = None
    coord: tuple[float, float] | None = None
    name: str | None = None


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    rating: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_set: float
    q_min: float = -math.inf
    q_max: float = math.inf
    in_service: bool = True


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p: float
    q: float = 0.0


@dataclass(frozen=True)
class GridSpec:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    generators: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()

    def __post_init__(self) -> None:
        validate(self)

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise UnknownBusError(bus_id)

    def branch(self, branch_id: int) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise UnknownElementError(f"unknown branch id {branch_id}")

    def generator(self, gen_id: int) -> Generator:
        for g in self.generators:
            if g.id == gen_id:
                return g
        raise UnknownElementError(f"unknown generator id {gen_id}")

    @property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind == "slack")

    def outageable(self) -> list[tuple[str, int]]:
        """In-service branches and generators, sorted by (kind, id)."""
        elems = [("branch", br.id) for br in self.branches if br.in_service]
        elems += [("generator", g.id) for g in self.generators if g.in_service]
        return sorted(elems)

    def incident_buses(self, element: tuple[str, int]) -> tuple[int, ...]:
        kind, eid = element
        if kind == "branch":
            br = self.branch(eid)
            return (br.from_bus, br.to_bus)
        if kind == "generator":
            return (self.generator(eid).bus,)
        raise UnknownElementError(f"unknown element kind {kind!r}")


def _check_unique(ids: Iterable[int], what: str) -> None:
    seen: set[int] = set()
    for i in ids:
        if i in seen:
            raise GridError(f"duplicate {what} id {i}")
        seen.add(i)


def validate(spec: GridSpec) -> None:
    """Check every structural invariant; raises :class:`GridError`."""
    if not (spec.base_mva > 0 and math.isfinite(spec.base_mva)):
        raise GridError("base_mva must be positive and finite")
    if not spec.buses:
        raise GridError("grid has no buses")
    _check_unique((b.id for b in spec.buses), "bus")
    _check_unique((br.id for br in spec.branches), "branch")
    _check_unique((g.id for g in spec.generators), "generator")
    _check_unique((ld.id for ld in spec.loads), "load")

    n_slack = 0
    for b in spec.buses:
        if b.kind not in BUS_KINDS:
            raise GridError(f"bus {b.id}: kind must be one of {BUS_KINDS}, got {b.kind!r}")
        if b.kind == "slack":
            n_slack += 1
        if b.kind in ("slack", "pv") and b.voltage_setpoint is None:
            raise GridError(f"bus {b.id}: {b.kind} bus needs voltage_setpoint")
        if b.voltage_setpoint is not None and not (b.voltage_setpoint > 0 and math.isfinite(b.voltage_setpoint)):
            raise GridError(f"bus {b.id}: voltage_setpoint must be > 0")
        if b.coord is not None and not all(math.isfinite(c) for c in b.coord):
            raise GridError(f"bus {b.id}: non-finite coordinate")
    if n_slack == 0:
        raise GridError("no slack bus")
    if n_slack > 1:
        raise GridError(f"multiple slack buses ({n_slack})")

    known = {b.id for b in spec.buses}
    for br in spec.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise UnknownBusError(end, f"branch {br.id}")
        if br.from_bus == br.to_bus:
            raise GridError(f"branch {br.id}: from_bus equals to_bus")
        if br.r == 0 and br.x == 0:
            raise GridError(f"branch {br.id}: zero impedance")
        if not (br.rating > 0):
            raise GridError(f"branch {br.id}: rating must be > 0")
        if not all(math.isfinite(v) for v in (br.r, br.x, br.b_shunt, br.rating)):
            raise GridError(f"branch {br.id}: non-finite parameter")
    for g in spec.generators:
        if g.bus not in known:
            raise UnknownBusError(g.bus, f"generator {g.id}")
        if g.q_min > g.q_max:
            raise GridError(f"generator {g.id}: q_min > q_max")
        if not math.isfinite(g.p_set):
            raise GridError(f"generator {g.id}: non-finite p_set")
    for ld in spec.loads:
        if ld.bus not in known:
            raise UnknownBusError(ld.bus, f"load {ld.id}")
        if not (math.isfinite(ld.p) and math.isfinite(ld.q)):
            raise GridError(f"load {ld.id}: non-finite demand")


# -- parsing ---------------------------------------------------------------

_FIELDS: dict[str, tuple[set[str], set[str]]] = {
    # section: (required, optional)
    "buses": ({"id", "kind"}, {"voltage_setpoint", "coord", "name"}),
    "branches": ({"id", "from_bus", "to_bus", "r", "x", "rating"}, {"b_shunt", "in_service"}),
    "generators": ({"id", "bus", "p_set"}, {"q_min", "q_max", "in_service"}),
    "loads": ({"id", "bus", "p"}, {"q"}),
}
_TOP = {"base_mva", "buses", "branches", "generators", "loads"}


def _number(obj: dict, key: str, where: str, default: Any = None) -> float:
    v = obj.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise GridParseError(f"{where}: field {key!r} must be a number")
    return float(v)


def _integer(obj: dict, key: str, where: str) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise GridParseError(f"{where}: field {key!r} must be an integer")
    return v


def _records(doc: dict, section: str, strict: bool) -> list[dict]:
    rows = doc.get(section, [])
    if not isinstance(rows, list):
        raise GridParseError(f"{section!r} must be an array")
    required, optional = _FIELDS[section]
    for i, row in enumerate(rows):
        where = f"{section}[{i}]"
        if not isinstance(row, dict):
            raise GridParseError(f"{where} must be an object")
        missing = required - row.keys()
        if missing:
            raise GridParseError(f"{where}: missing field(s) {sorted(missing)}")
        extra = row.keys() - required - optional
        if extra and strict:
            raise GridParseError(f"{where}: unknown field(s) {sorted(extra)}")
    return rows


def parse_grid(text: str, *, strict: bool = True) -> GridSpec:
    """Parse grid-file JSON into a validated, per-unit :class:`GridSpec`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridParseError(f"syntax error: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise GridParseError("top level must be an object", 1, 1)
    extra = doc.keys() - _TOP
    if extra and strict:
        raise GridParseError(f"unknown top-level key(s) {sorted(extra)}")
    if "base_mva" not in doc or "buses" not in doc:
        raise GridParseError("missing base_mva or buses")
    base = _number(doc, "base_mva", "top level")
    if base <= 0:
        raise GridParseError("base_mva must be positive")

    buses = []
    for i, row in enumerate(_records(doc, "buses", strict)):
        where = f"buses[{i}]"
        coord = row.get("coord")
        if coord is not None:
            if not (isinstance(coord, list) and len(coord) == 2
                    and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in coord)):
                raise GridParseError(f"{where}: coord must be [x, y]")
            coord = (float(coord[0]), float(coord[1]))
        vset = row.get("voltage_setpoint")
        buses.append(Bus(
            id=_integer(row, "id", where),
            kind=str(row["kind"]),
            voltage_setpoint=None if vset is None else _number(row, "voltage_setpoint", where),
            coord=coord,
            name=row.get("name"),
        ))

    branches = []
    for i, row in enumerate(_records(doc, "branches", strict)):
        where = f"branches[{i}]"
        branches.append(Branch(
            id=_integer(row, "id", where),
            from_bus=_integer(row, "from_bus", where),
            to_bus=_integer(row, "to_bus", where),
            r=_number(row, "r", where),
            x=_number(row, "x", where),
            b_shunt=_number(row, "b_shunt", where, 0.0),
            rating=_number(row, "rating", where) / base,
            in_service=bool(row.get("in_service", True)),
        ))

    gens = []
    for i, row in enumerate(_records(doc, "generators", strict)):
        where = f"generators[{i}]"
        gens.append(Generator(
            id=_integer(row, "id", where),
            bus=_integer(row, "bus", where),
            p_set=_number(row, "p_set", where) / base,
            q_min=_number(row, "q_min", where, -math.inf) / base,
            q_max=_number(row, "q_max", where, math.inf) / base,
            in_service=bool(row.get("in_service", True)),
        ))

    loads = []
    for i, row in enumerate(_records(doc, "loads", strict)):
        where = f"loads[{i}]"
        loads.append(Load(
            id=_integer(row, "id", where),
            bus=_integer(row, "bus", where),
            p=_number(row, "p", where) / base,
            q=_number(row, "q", where, 0.0) / base,
        ))

    try:
        return GridSpec(base, tuple(buses), tuple(branches), tuple(gens), tuple(loads))
    except GridParseError:
        raise
    except GridError as exc:
        # keep the specific subclass (UnknownBusError etc.) for callers
        raise exc from None


def dump_grid(spec: GridSpec) -> str:
    """Inverse of :func:`parse_grid` (powers back in MW/MVAr/MVA)."""
    base = spec.base_mva

    def lim(v: float) -> float | None:
        return None if math.isinf(v) else v * base

    doc: dict[str, Any] = {"base_mva": base, "buses": [], "branches": [], "generators": [], "loads": []}
    for b in spec.buses:
        row: dict[str, Any] = {"id": b.id, "kind": b.kind}
        if b.voltage_setpoint is not None:
            row["voltage_setpoint"] = b.voltage_setpoint
        if b.coord is not None:
            row["coord"] = list(b.coord)
        if b.name is not None:
            row["name"] = b.name
        doc["buses"].append(row)
    for br in spec.branches:
        doc["branches"].append({
            "id": br.id, "from_bus": br.from_bus, "to_bus": br.to_bus, "r": br.r, "x": br.x,
            "b_shunt": br.b_shunt, "rating": br.rating * base, "in_service": br.in_service,
        })
    for g in spec.generators:
        row = {"id": g.id, "bus": g.bus, "p_set": g.p_set * base, "in_service": g.in_service}
        for k in ("q_min", "q_max"):
            v = lim(getattr(g, k))
            if v is not None:
                row[k] = v
        doc["generators"].append(row)
    for ld in spec.loads:
        doc["loads"].append({"id": ld.id, "bus": ld.bus, "p": ld.p * base, "q": ld.q * base})
    return json.dumps(doc, indent=2)


def load_fixture(name: str = "seven_bus") -> GridSpec:
    """Load a grid shipped in ``gridwatch/data``."""
    from importlib.resources import files

    return parse_grid(files("gridwatch.data").joinpath(f"{name}.json").read_text(encoding="utf-8"))


# -- admittance ------------------------------------------------------------

@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense bus admittance matrix split into conductance and susceptance."""

    g: np.ndarray
    b: np.ndarray
    bus_ids: tuple[int, ...]
    index: dict[int, int] = field(compare=False)

    @property
    def y(self) -> np.ndarray:
        return self.g + 1j * self.b

    def __len__(self) -> int:
        return len(self.bus_ids)


def build_admittance(spec: GridSpec) -> AdmittanceMatrix:
    n = len(spec.buses)
    index = spec.bus_index()
    y = np.zeros((n, n), dtype=complex)
    for br in spec.branches:
        if not br.in_service:
            continue
        i, k = index[br.from_bus], index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        y[i, i] += ys + ysh
        y[k, k] += ys + ysh
        y[i, k] -= ys
        y[k, i] -= ys
    g = np.ascontiguousarray(y.real)
    b = np.ascontiguousarray(y.imag)
    g.setflags(write=False)
    b.setflags(write=False)
    return AdmittanceMatrix(g=g, b=b, bus_ids=spec.bus_ids, index=index)


# -- topology --------------------------------------------------------------

def apply_outage(spec: GridSpec, c: Contingency | Iterable[tuple[str, int]]) -> GridSpec:
    """Return a copy of ``spec`` with the contingency's elements out of service."""
    elements = getattr(c, "elements", c)
    out_branches: set[int] = set()
    out_gens: set[int] = set()
    for kind, eid in elements:
        if kind == "branch":
            spec.branch(eid)
            out_branches.add(eid)
        elif kind == "generator":
            spec.generator(eid)
            out_gens.add(eid)
        else:
            raise UnknownElementError(f"unknown element kind {kind!r}")
    branches = tuple(replace(br, in_service=False) if br.id in out_branches else br for br in spec.branches)
    gens = tuple(replace(g, in_service=False) if g.id in out_gens else g for g in spec.generators)
    return replace(spec, branches=branches, generators=gens)


def connectivity(spec: GridSpec) -> list[tuple[int, ...]]:
    """Islands formed by in-service branches, each sorted, ordered by smallest bus id."""
    adj: dict[int, set[int]] = {b.id: set() for b in spec.buses}
    for br in spec.branches:
        if br.in_service:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    seen: set[int] = set()
    islands = []
    for start in sorted(adj):
        if start in seen:
            continue
        stack = [start]
        seen.add(start)
        members = []
        while stack:
            u = stack.pop()
            members.append(u)
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        islands.append(tuple(sorted(members)))
    return islands


def drop_buses(spec: GridSpec, bus_ids: Iterable[int]) -> GridSpec:
    """Remove buses along with every branch, generator and load touching them."""
    gone = set(bus_ids)
    return GridSpec(
        base_mva=spec.base_mva,
        buses=tuple(b for b in spec.buses if b.id not in gone),
        branches=tuple(br for br in spec.branches if br.from_bus not in gone and br.to_bus not in gone),
        generators=tuple(g for g in spec.generators if g.bus not in gone),
        loads=tuple(ld for ld in spec.loads if ld.bus not in gone),
    )
