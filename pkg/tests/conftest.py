from __future__ import annotations

import numpy as np
import pytest

from gridwatch.grid import Branch, Bus, Generator, GridSpec, Load, load_fixture


def two_bus(x: float = 0.1, p_load: float = 0.5, q_load: float = 0.0, r: float = 0.0) -> GridSpec:
    return GridSpec(
        base_mva=100.0,
        buses=(Bus(1, "slack", 1.0, (0.0, 0.0)), Bus(2, "pq", None, (1.0, 0.0))),
        branches=(Branch(1, 1, 2, r, x, 0.0, 10.0),),
        generators=(Generator(1, 1, 0.0),),
        loads=(Load(1, 2, p_load, q_load),),
    )


def random_grid(rng: np.random.Generator, n_max: int = 10, lossless: bool = False) -> GridSpec:
    """Connected random grid: spanning tree plus a few chords, mixed bus kinds."""
    n = int(rng.integers(2, n_max + 1))
    buses = [Bus(1, "slack", float(rng.uniform(0.98, 1.05)), (0.0, 0.0))]
    gens = [Generator(1, 1, 0.0)]
    for i in range(2, n + 1):
        coord = (float(rng.uniform(0, 100)), float(rng.uniform(0, 100)))
        if rng.random() < 0.3:
            buses.append(Bus(i, "pv", float(rng.uniform(0.98, 1.05)), coord))
            gens.append(Generator(len(gens) + 1, i, float(rng.uniform(0.0, 0.3))))
        else:
            buses.append(Bus(i, "pq", None, coord))
    pairs = {(int(rng.integers(1, i)), i) for i in range(2, n + 1)}
    for _ in range(int(rng.integers(0, n))):
        a, b = sorted(int(v) for v in rng.choice(np.arange(1, n + 1), 2, replace=False))
        pairs.add((a, b))
    branches = []
    for k, (a, b) in enumerate(sorted(pairs), 1):
        r = 0.0 if lossless else float(rng.uniform(0.0, 0.05))
        bsh = 0.0 if lossless else float(rng.uniform(0.0, 0.05))
        branches.append(Branch(k, a, b, r, float(rng.uniform(0.05, 0.3)), bsh, 2.0))
    loads = [Load(i, b.id, float(rng.uniform(0.0, 0.3)), float(rng.uniform(-0.05, 0.1)))
             for i, b in enumerate(buses[1:], 1) if rng.random() < 0.7]
    return GridSpec(100.0, tuple(buses), tuple(branches), tuple(gens), tuple(loads))


def lossless(spec: GridSpec) -> GridSpec:
    """Same topology and injections with r = 0 and no line charging."""
    from dataclasses import replace

    return replace(spec, branches=tuple(replace(br, r=0.0, b_shunt=0.0) for br in spec.branches))


@pytest.fixture(scope="session")
def seven():
    return load_fixture()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(name, ok, detail)`` prints one PASS/FAIL line and asserts."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
