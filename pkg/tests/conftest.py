import math

import numpy as np
import pytest

from shedverify.network import Bus, Generator, Line, Load, NetworkCase, load_case

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def case2():
    return load_case("case2")


@pytest.fixture(scope="session")
def case3():
    return load_case("case3")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


def random_grid(rng: np.random.Generator, max_lines: int = 6, name: str = "rand") -> NetworkCase:
    """Small connected grid: a spanning tree plus a few extra lines."""
    nb = int(rng.integers(2, 5))
    buses = tuple(Bus(i + 1, 0.9, 1.1) for i in range(nb))
    ends = [(int(rng.integers(0, i)), i) for i in range(1, nb)]
    pairs = [(i, j) for i in range(nb) for j in range(i + 1, nb) if (i, j) not in ends]
    n_extra = int(rng.integers(0, min(len(pairs), max_lines - len(ends)) + 1))
    for k in rng.permutation(len(pairs))[:n_extra]:
        ends.append(pairs[k])
    lines = []
    for k, (i, j) in enumerate(ends):
        r, x = rng.uniform(0.005, 0.05), rng.uniform(0.05, 0.4)
        zz = r * r + x * x
        th = math.radians(float(rng.uniform(15, 40)))
        lines.append(Line(k + 1, i + 1, j + 1, r / zz, -x / zz, 0.0, 0.0, 0.01, 0.01,
                          1.0, 1.0, 0.0, float(rng.uniform(0.3, 1.5)), -th, th,
                          float(rng.uniform(0.2, 2.0))))
    gen_bus = int(rng.integers(1, nb + 1))
    gens = (Generator(gen_bus, float(rng.uniform(0.5, 2.0)), -1.0, 1.0),)
    loads = tuple(Load(b, float(rng.uniform(0.1, 0.6)), float(rng.uniform(0.0, 0.2)))
                  for b in range(1, nb + 1) if b != gen_bus)
    if not loads:
        loads = (Load(gen_bus, 0.3, 0.1),)
    return NetworkCase(name, 100.0, buses, tuple(lines), gens, loads, ())
