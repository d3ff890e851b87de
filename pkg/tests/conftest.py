import math

import numpy as np
import pytest

from rydtherm.census import blockade_graph, enumerate_census
from rydtherm.geometry import blockade_radius, build_chain, interaction_matrix
from rydtherm.hamiltonian import SpinSystem
from rydtherm.statevec import quench_evolve

TWO_PI = 2 * math.pi


def chain_system(N, theta, v12=20.0, omega_mhz=1.0, d=4.0, delta_mhz=0.0):
    geom = build_chain(N, d, theta)
    V = interaction_matrix(geom, v12_mhz=v12)
    return geom, SpinSystem(V, TWO_PI * omega_mhz, TWO_PI * delta_mhz)


def census_of(geom, omega_mhz=1.0):
    return enumerate_census(blockade_graph(geom, blockade_radius(470.0, TWO_PI * omega_mhz)))


@pytest.fixture(scope="session")
def linear10():
    """N=10 straight chain quench to 6 us with census occupations."""
    geom, sys = chain_system(10, 180.0)
    census = census_of(geom)
    trace = quench_evolve(sys, t_max=6.0, dt_out=0.02, census=census)
    return sys, census, trace


@pytest.fixture(scope="session")
def zigzag10():
    geom, sys = chain_system(10, 60.0)
    census = census_of(geom)
    trace = quench_evolve(sys, t_max=6.0, dt_out=0.02, census=census)
    return sys, census, trace


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
