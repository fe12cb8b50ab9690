from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridwatch.grid import Branch, Bus, GridSpec, apply_outage, build_admittance
from gridwatch.powerflow import (
    Controls,
    Converged,
    Diverged,
    Islanded,
    SolveOptions,
    SystemState,
    bus_types,
    build_jacobian,
    compute_mismatch,
    line_flows,
    solve_newton,
)
from conftest import lossless, random_grid, two_bus
from oracles import fd_jacobian, mismatch_bruteforce, reachable_islands, two_bus_solution


def random_state(spec, rng) -> SystemState:
    n = len(spec.buses)
    return SystemState(rng.uniform(0.9, 1.1, n), rng.uniform(-0.3, 0.3, n))


def random_controls(spec, rng) -> Controls:
    n = len(spec.generators)
    return Controls(tuple(g.id for g in spec.generators), rng.uniform(0, 1, n), rng.uniform(-0.5, 0.5, n))


def reduced_residual(spec, u, y, base: SystemState):
    _, pv, pq = bus_types(spec)
    pvpq = np.sort(np.concatenate([pv, pq]))

    def f(x):
        theta = base.theta.copy()
        v = base.v.copy()
        theta[pvpq] = x[: len(pvpq)]
        v[pq] = x[len(pvpq):]
        mis = compute_mismatch(SystemState(v, theta), u, spec, y)
        return np.concatenate([mis.f_p[pvpq], mis.f_q[pq]])

    x0 = np.concatenate([base.theta[pvpq], base.v[pq]])
    return f, x0


# -- mismatch -----------------------------------------------------------------

def test_mismatch_flat_lossless_no_injections():
    spec = GridSpec(100.0, (Bus(1, "slack", 1.0), Bus(2, "pq"), Bus(3, "pq")),
                    (Branch(1, 1, 2, 0.0, 0.1), Branch(2, 2, 3, 0.0, 0.2), Branch(3, 1, 3, 0.0, 0.3)))
    y = build_admittance(spec)
    mis = compute_mismatch(SystemState(np.ones(3), np.zeros(3)), Controls.from_spec(spec), spec, y)
    assert np.all(mis.f_p == 0.0) and np.all(np.abs(mis.f_q) < 1e-12)


def test_mismatch_two_bus_flat_hand_value():
    spec = two_bus()
    y = build_admittance(spec)
    mis = compute_mismatch(SystemState(np.ones(2), np.zeros(2)), Controls.from_spec(spec), spec, y)
    assert mis.f_p[1] == pytest.approx(0.5, abs=1e-15)
    assert mis.f_q[1] == pytest.approx(0.0, abs=1e-12)


def test_mismatch_matches_bruteforce(rng):
    for _ in range(100):
        spec = random_grid(rng)
        st_, u = random_state(spec, rng), random_controls(spec, rng)
        mis = compute_mismatch(st_, u, spec, build_admittance(spec))
        fp, fq = mismatch_bruteforce(st_.v, st_.theta, u.p_gen, u.q_gen, spec)
        assert np.max(np.abs(mis.f_p - fp)) < 1e-12
        assert np.max(np.abs(mis.f_q - fq)) < 1e-12


def test_mismatch_dimension_error(seven):
    y = build_admittance(seven)
    with pytest.raises(ValueError):
        compute_mismatch(SystemState(np.ones(3), np.zeros(3)), Controls.from_spec(seven), seven, y)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.sampled_from([0.5, -1.25, 2.0, 0.0078125]))
def test_angle_reference_invariance(seed, shift):
    # shifts are exactly representable and small relative to the angles' binary scale
    r = np.random.default_rng(seed)
    spec = random_grid(r)
    st_ = random_state(spec, r)
    theta = np.round(st_.theta * 64) / 64
    u = random_controls(spec, r)
    y = build_admittance(spec)
    a = compute_mismatch(SystemState(st_.v, theta), u, spec, y)
    b = compute_mismatch(SystemState(st_.v, theta + shift), u, spec, y)
    assert np.array_equal(a.f_p, b.f_p) and np.array_equal(a.f_q, b.f_q)


# -- jacobian -----------------------------------------------------------------

def test_jacobian_matches_finite_differences(rng):
    for _ in range(50):
        spec = random_grid(rng)
        u, base = random_controls(spec, rng), random_state(spec, rng)
        y = build_admittance(spec)
        f, x0 = reduced_residual(spec, u, y, base)
        jac = build_jacobian(base, spec, y)
        fd = fd_jacobian(f, x0, 1e-6)
        assert jac.shape == fd.shape
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(jac - fd) / scale) < 1e-5


def test_jacobian_slack_only_is_empty():
    spec = GridSpec(100.0, (Bus(1, "slack", 1.0),))
    jac = build_jacobian(SystemState(np.ones(1), np.zeros(1)), spec, build_admittance(spec))
    assert jac.shape == (0, 0)


def test_jacobian_angle_shift_unchanged(seven, rng):
    y = build_admittance(seven)
    base = random_state(seven, rng)
    j1 = build_jacobian(base, seven, y)
    j2 = build_jacobian(SystemState(base.v, base.theta + 0.7), seven, y)
    np.testing.assert_allclose(j1, j2, rtol=0, atol=1e-12)


# -- newton ---------------------------------------------------------------------

def test_two_bus_closed_form():
    out = solve_newton(two_bus(), opts=SolveOptions(tol=1e-12))
    assert isinstance(out, Converged)
    v2, th2 = two_bus_solution(0.1, 0.5)
    assert abs(out.state.v[1] - v2) < 1e-6
    assert abs(out.state.theta[1] - th2) < 1e-6
    assert out.iterations <= 5


def test_no_load_converges_at_flat_start():
    spec = GridSpec(100.0, (Bus(1, "slack", 1.0), Bus(2, "pq")), (Branch(1, 1, 2, 0.0, 0.1),))
    out = solve_newton(spec)
    assert isinstance(out, Converged) and out.iterations <= 1
    assert np.allclose(out.state.v, 1.0) and np.allclose(out.state.theta, 0.0)
    assert all(f.loading == 0 for f in line_flows(out.state, spec))


def test_fixture_converges_and_certificate(seven):
    out = solve_newton(seven)
    assert isinstance(out, Converged)
    assert out.final_mismatch_norm <= 1e-8
    mis = compute_mismatch(out.state, out.controls, seven, build_admittance(seven))
    assert mis.norm() <= 1e-8
    assert out.state.theta[0] == 0.0


def test_certificate_on_random_grids(rng):
    for _ in range(30):
        spec = random_grid(rng)
        out = solve_newton(spec)
        if isinstance(out, Converged):
            mis = compute_mismatch(out.state, out.controls, spec, build_admittance(spec))
            assert mis.norm() <= 1e-8


def test_bridge_removal_islanded(seven):
    post = apply_outage(seven, [("branch", 6)])
    out = solve_newton(post)
    assert isinstance(out, Islanded)
    assert out.islands == reachable_islands(post)


def test_divergence_is_reported():
    # far beyond the two-bus nose point (p_max = V^2 / 2x = 5)
    out = solve_newton(two_bus(p_load=20.0))
    assert isinstance(out, Diverged)
    assert out.iterations <= 20


def test_max_iter_one_diverges_on_loaded_case(seven):
    out = solve_newton(seven, opts=SolveOptions(max_iter=1))
    assert isinstance(out, Diverged)


def test_options_validated():
    with pytest.raises(ValueError):
        SolveOptions(tol=0)
    with pytest.raises(ValueError):
        SolveOptions(max_iter=0)


def test_pv_bus_holds_setpoint(seven):
    out = solve_newton(seven)
    assert out.state.v[seven.bus_index()[2]] == pytest.approx(1.01)


# -- flows and conservation -------------------------------------------------------

def test_two_bus_slack_terminal_flow():
    out = solve_newton(two_bus(), opts=SolveOptions(tol=1e-12))
    fl = line_flows(out.state, two_bus())[0]
    assert fl.p_from == pytest.approx(0.5, abs=1e-9)
    assert fl.p_to == pytest.approx(-0.5, abs=1e-9)


def test_lossless_conservation(seven, rng):
    cases = [lossless(seven)] + [random_grid(rng, lossless=True) for _ in range(20)]
    for spec in cases:
        out = solve_newton(spec)
        if not isinstance(out, Converged):
            continue
        gen = out.bus_p_gen.sum()
        load = sum(ld.p for ld in spec.loads)
        assert abs(gen - load) < 1e-8
        # lossless branches: terminal real flows cancel
        for fl in line_flows(out.state, spec):
            assert abs(fl.p_from + fl.p_to) < 1e-9


def test_loading_definition(seven):
    out = solve_newton(seven)
    for fl, br in zip(line_flows(out.state, seven), seven.branches):
        if br.in_service:
            expect = max(math.hypot(fl.p_from, fl.q_from), math.hypot(fl.p_to, fl.q_to)) / br.rating
            assert fl.loading == pytest.approx(expect)
        else:
            assert fl.loading == 0.0
