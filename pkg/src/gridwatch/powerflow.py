"""Newton-Raphson AC power flow.

The residual is the per-bus power balance

    f_p[i] = -Pg[i] + Pl[i] + sum_k |V_i||V_k| (G_ik cos t_ik + B_ik sin t_ik)
    f_q[i] = -Qg[i] + Ql[i] + sum_k |V_i||V_k| (G_ik sin t_ik - B_ik cos t_ik)

with t_ik = theta_i - theta_k. The sum runs over every k with Y_ik != 0,
including k = i. Unknowns are the angles of all non-slack buses and the
voltage magnitudes of PQ buses. A PV bus with no in-service generator is
solved as PQ. The slack bus stays the angle reference even if its
generators are out; whatever it must inject is reported per bus.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from gridwatch.grid import AdmittanceMatrix, GridSpec, build_admittance, connectivity

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class SystemState:
    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self) -> None:
        if self.v.shape != self.theta.shape:
            raise ValueError("v and theta lengths differ")


@dataclass(frozen=True)
class Controls:
    """Per-generator set points, aligned with ``gen_ids``."""

    gen_ids: tuple[int, ...]
    p_gen: np.ndarray
    q_gen: np.ndarray

    @classmethod
    def from_spec(cls, spec: GridSpec) -> Controls:
        return cls(
            gen_ids=tuple(g.id for g in spec.generators),
            p_gen=np.array([g.p_set for g in spec.generators], dtype=float),
            q_gen=np.zeros(len(spec.generators)),
        )

    def for_spec(self, spec: GridSpec) -> Controls:
        """Re-align to ``spec.generators``; unknown generators take their set point."""
        pos = {gid: i for i, gid in enumerate(self.gen_ids)}
        p, q = [], []
        for g in spec.generators:
            i = pos.get(g.id)
            p.append(g.p_set if i is None else self.p_gen[i])
            q.append(0.0 if i is None else self.q_gen[i])
        return Controls(tuple(g.id for g in spec.generators), np.array(p, dtype=float), np.array(q, dtype=float))


@dataclass(frozen=True)
class Mismatch:
    f_p: np.ndarray
    f_q: np.ndarray

    def norm(self) -> float:
        if self.f_p.size == 0:
            return 0.0
        return float(max(np.max(np.abs(self.f_p)), np.max(np.abs(self.f_q))))


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    max_iter: int = 20
    flat_start: bool = True

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class Converged:
    state: SystemState
    controls: Controls
    iterations: int
    final_mismatch_norm: float
    bus_p_gen: np.ndarray
    bus_q_gen: np.ndarray
    trace: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Diverged:
    iterations: int
    mismatch_norm: float
    reason: str = ""
    trace: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class Islanded:
    islands: list[tuple[int, ...]]


SolveOutcome = Converged | Diverged | Islanded


def bus_injections(spec: GridSpec, u: Controls) -> tuple[np.ndarray, ...]:
    """Per-bus (Pg, Qg, Pl, Ql) from in-service generators and loads."""
    index = spec.bus_index()
    n = len(spec.buses)
    pg, qg, pl, ql = (np.zeros(n) for _ in range(4))
    u = u if u.gen_ids == tuple(g.id for g in spec.generators) else u.for_spec(spec)
    for j, g in enumerate(spec.generators):
        if g.in_service:
            pg[index[g.bus]] += u.p_gen[j]
            qg[index[g.bus]] += u.q_gen[j]
    for ld in spec.loads:
        pl[index[ld.bus]] += ld.p
        ql[index[ld.bus]] += ld.q
    return pg, qg, pl, ql


def _network_power(state: SystemState, y: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    # angle differences keep the result exactly invariant to the angle reference
    t = state.theta[:, None] - state.theta[None, :]
    vv = state.v[:, None] * state.v[None, :]
    cos_t, sin_t = np.cos(t), np.sin(t)
    p = (vv * (y.g * cos_t + y.b * sin_t)).sum(axis=1)
    q = (vv * (y.g * sin_t - y.b * cos_t)).sum(axis=1)
    return p, q


def compute_mismatch(state: SystemState, u: Controls, spec: GridSpec, y: AdmittanceMatrix) -> Mismatch:
    n = len(spec.buses)
    if state.v.shape != (n,) or len(y) != n or len(u.p_gen) != len(u.gen_ids):
        raise ValueError(f"dimension mismatch: {n} buses, state {state.v.shape}, Y {len(y)}")
    pg, qg, pl, ql = bus_injections(spec, u)
    p, q = _network_power(state, y)
    return Mismatch(f_p=-pg + pl + p, f_q=-qg + ql + q)


def bus_types(spec: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index arrays (slack, pv, pq) with generator-less PV buses demoted to PQ."""
    index = spec.bus_index()
    has_gen = {g.bus for g in spec.generators if g.in_service}
    slack, pv, pq = [], [], []
    for b in spec.buses:
        i = index[b.id]
        if b.kind == "slack":
            slack.append(i)
        elif b.kind == "pv" and b.id in has_gen:
            pv.append(i)
        else:
            pq.append(i)
    as_idx = lambda xs: np.array(xs, dtype=int)  # noqa: E731
    return as_idx(slack), as_idx(pv), as_idx(pq)


def build_jacobian(state: SystemState, spec: GridSpec, y: AdmittanceMatrix) -> np.ndarray:
    """d(f_p[non-slack], f_q[pq]) / d(theta[non-slack], V[pq])."""
    slack, pv, pq = bus_types(spec)
    pvpq = np.sort(np.concatenate([pv, pq]))
    ybus = y.y
    vc = state.v * np.exp(1j * state.theta)
    ibus = ybus @ vc
    vnorm = np.exp(1j * state.theta)
    diag_v = np.diag(vc)
    ds_dvm = diag_v @ np.conj(ybus @ np.diag(vnorm)) + np.diag(np.conj(ibus) * vnorm)
    ds_dva = 1j * diag_v @ np.conj(np.diag(ibus) - ybus @ diag_v)

    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def flat_state(spec: GridSpec) -> SystemState:
    v = np.array([b.voltage_setpoint if b.voltage_setpoint is not None else 1.0 for b in spec.buses])
    slack, pv, pq = bus_types(spec)
    # demoted PV buses start at 1.0 like any PQ bus
    v[pq] = 1.0
    return SystemState(v=v, theta=np.zeros(len(spec.buses)))


def unsupplied_islands(spec: GridSpec) -> list[tuple[int, ...]]:
    islands = connectivity(spec)
    slack_id = spec.slack_bus.id
    return [isl for isl in islands if slack_id not in isl]


def solve_newton(spec: GridSpec, u: Controls | None = None, opts: SolveOptions | None = None) -> SolveOutcome:
    opts = opts or SolveOptions()
    u = Controls.from_spec(spec) if u is None else u.for_spec(spec)
    islands = connectivity(spec)
    if len(islands) > 1:
        return Islanded(islands)

    y = build_admittance(spec)
    slack, pv, pq = bus_types(spec)
    pvpq = np.sort(np.concatenate([pv, pq]))
    npvpq = len(pvpq)
    state = flat_state(spec)
    v, theta = state.v.copy(), state.theta.copy()

    def reduced(vv: np.ndarray, tt: np.ndarray) -> np.ndarray:
        mis = compute_mismatch(SystemState(vv, tt), u, spec, y)
        return np.concatenate([mis.f_p[pvpq], mis.f_q[pq]])

    trace: list[float] = []
    f = reduced(v, theta)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    trace.append(norm)
    it = 0
    while True:
        if not np.isfinite(norm) or norm > DIVERGENCE_LIMIT:
            return Diverged(it, norm, "mismatch blew up", trace)
        if norm <= opts.tol:
            break
        if it >= opts.max_iter:
            return Diverged(it, norm, f"no convergence in {opts.max_iter} iterations", trace)
        jac = build_jacobian(SystemState(v, theta), spec, y)
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            return Diverged(it, norm, f"singular Jacobian: {exc}", trace)
        if not np.all(np.isfinite(dx)):
            return Diverged(it, norm, "non-finite Newton step", trace)
        theta[pvpq] += dx[:npvpq]
        v[pq] += dx[npvpq:]
        it += 1
        f = reduced(v, theta)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        trace.append(norm)
        log.debug("newton iter %d: |f|inf = %.3e", it, norm)
        if np.any(v <= 0):
            return Diverged(it, norm, "non-positive voltage magnitude", trace)

    state = SystemState(v, theta)
    controls, bus_pg, bus_qg, warnings = _dispatch(spec, u, state, y)
    return Converged(state, controls, it, norm, bus_pg, bus_qg, trace, warnings)


def _dispatch(spec: GridSpec, u: Controls, state: SystemState, y: AdmittanceMatrix):
    """Assign slack P/Q and PV Q to generators so the full residual vanishes."""
    index = spec.bus_index()
    slack, pv, _ = bus_types(spec)
    pg, qg, pl, ql = bus_injections(spec, u)
    p, q = _network_power(state, y)
    bus_pg = pg.copy()
    bus_qg = qg.copy()
    p_gen = u.p_gen.copy()
    q_gen = u.q_gen.copy()
    warnings: list[str] = []

    for i in np.concatenate([slack, pv]):
        need_q = q[i] + ql[i]
        need_p = p[i] + pl[i] if i in slack else None
        bus_qg[i] = need_q
        if need_p is not None:
            bus_pg[i] = need_p
        gens = [j for j, g in enumerate(spec.generators) if g.in_service and index[g.bus] == i]
        if not gens:
            continue
        share_q = need_q / len(gens)
        for j in gens:
            q_gen[j] = share_q
        if need_p is not None:
            # the slack absorbs the imbalance on top of the scheduled outputs
            extra = (need_p - pg[i]) / len(gens)
            for j in gens:
                p_gen[j] += extra
    for j, g in enumerate(spec.generators):
        if not g.in_service:
            continue
        if not (g.q_min - 1e-9 <= q_gen[j] <= g.q_max + 1e-9):
            warnings.append(
                f"generator {g.id}: q={q_gen[j]:.4f} outside [{g.q_min:.4f}, {g.q_max:.4f}]"
            )
    for w in warnings:
        log.debug(w)
    controls = Controls(u.gen_ids, p_gen, q_gen)
    return controls, bus_pg, bus_qg, warnings


@dataclass(frozen=True)
class BranchFlow:
    branch_id: int
    p_from: float
    q_from: float
    p_to: float
    q_to: float
    loading: float


def line_flows(state: SystemState, spec: GridSpec) -> list[BranchFlow]:
    """Pi-model terminal flows for every branch (zero for out-of-service ones)."""
    index = spec.bus_index()
    vc = state.v * np.exp(1j * state.theta)
    flows = []
    for br in spec.branches:
        if not br.in_service:
            flows.append(BranchFlow(br.id, 0.0, 0.0, 0.0, 0.0, 0.0))
            continue
        vf, vt = vc[index[br.from_bus]], vc[index[br.to_bus]]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        s_from = vf * np.conj((vf - vt) * ys + ysh * vf)
        s_to = vt * np.conj((vt - vf) * ys + ysh * vt)
        loading = max(abs(s_from), abs(s_to)) / br.rating
        flows.append(BranchFlow(br.id, s_from.real, s_from.imag, s_to.real, s_to.imag, float(loading)))
    return flows


def outcome_to_dict(outcome: SolveOutcome, spec: GridSpec) -> dict:
    """JSON-ready summary used by the CLI."""
    if isinstance(outcome, Islanded):
        return {"status": "islanded", "islands": [list(i) for i in outcome.islands]}
    if isinstance(outcome, Diverged):
        return {
            "status": "diverged",
            "iterations": outcome.iterations,
            "mismatch_norm": _finite_or_none(outcome.mismatch_norm),
            "reason": outcome.reason,
            "trace": [_finite_or_none(t) for t in outcome.trace],
        }
    st = outcome.state
    flows = line_flows(st, spec)
    return {
        "status": "converged",
        "iterations": outcome.iterations,
        "final_mismatch_norm": outcome.final_mismatch_norm,
        "trace": outcome.trace,
        "warnings": outcome.warnings,
        "buses": [
            {"id": b.id, "v": float(st.v[i]), "theta": float(st.theta[i]),
             "theta_deg": math.degrees(float(st.theta[i])),
             "p_gen": float(outcome.bus_p_gen[i]), "q_gen": float(outcome.bus_q_gen[i])}
            for i, b in enumerate(spec.buses)
        ],
        "branches": [
            {"id": fl.branch_id, "p_from": fl.p_from, "q_from": fl.q_from,
             "p_to": fl.p_to, "q_to": fl.q_to, "loading": fl.loading}
            for fl in flows
        ],
    }


def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None
