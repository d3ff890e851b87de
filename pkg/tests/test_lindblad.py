import math

import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings, strategies as st

from conftest import TWO_PI, chain_system
from rydtherm.analysis import rabi_decay_fit
from rydtherm.hamiltonian import DimensionOverflow, SpinSystem, dense_hamiltonian
from rydtherm.lindblad import (
    InvalidNoise,
    NoiseModel,
    dephasing_rates,
    lindblad_evolve,
    monte_carlo_quench,
    sample_drives,
)
from rydtherm.statevec import output_grid, quench_evolve

SZ = np.diag([-1.0, 1.0])  # basis order (down, up)


def _site_op(op, i, N):
    mats = [np.eye(2)] * N
    mats[i] = op
    out = np.array([[1.0]])
    for m in mats:
        out = np.kron(out, m)
    return out


def dense_lindbladian(sys, gamma, gamma_c):
    """Column-stacked superoperator from explicit jump operators."""
    N = sys.N
    H = dense_hamiltonian(sys)
    I = np.eye(sys.dim)
    jumps = [math.sqrt(gamma / 2) * _site_op(SZ, i, N) for i in range(N)]
    jumps.append(math.sqrt(gamma_c / 2) * sum(_site_op(SZ, i, N) for i in range(N)))
    L = -1j * (np.kron(I, H) - np.kron(H.T, I))
    for J in jumps:
        JdJ = J.conj().T @ J
        L += np.kron(J.conj(), J) - 0.5 * np.kron(I, JdJ) - 0.5 * np.kron(JdJ.T, I)
    return L


def oracle_P(sys, gamma, gamma_c, times, rho0=None):
    L = dense_lindbladian(sys, gamma, gamma_c)
    dim = sys.dim
    if rho0 is None:
        rho0 = np.zeros((dim, dim), complex)
        rho0[0, 0] = 1
    counts = np.array([bin(k).count("1") for k in range(dim)])
    out = []
    for t in times:
        rho = (la.expm(L * t) @ rho0.reshape(-1, order="F")).reshape(dim, dim, order="F")
        out.append(np.bincount(counts, weights=rho.diagonal().real, minlength=sys.N + 1))
    return np.array(out)


def random_rho(rng, dim):
    A = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = A @ A.conj().T
    return rho / np.trace(rho)


# --- dephasing rates ---------------------------------------------------------

def test_dephasing_rates_match_superoperator_diagonal():
    N, g, gc = 3, 0.7, 0.3
    sys = SpinSystem(np.zeros((N, N)), 0.0, 0.0)
    L = dense_lindbladian(sys, g, gc)
    R = dephasing_rates(N, g, gc)
    dim = sys.dim
    # at Omega=0 and V=0 the superoperator is diagonal in the |a><b| basis
    assert np.allclose(L - np.diag(np.diag(L)), 0)
    diag = np.diag(L).reshape(dim, dim, order="F")
    assert np.allclose(-diag.real, R, atol=1e-12)


def test_dephasing_rates_zero_on_diagonal():
    R = dephasing_rates(4, 1.0, 2.0)
    assert np.all(np.diag(R) == 0)
    assert np.allclose(R, R.T)


# --- evolution against the dense oracle --------------------------------------

@pytest.mark.parametrize("theta", [180.0, 60.0])
def test_krylov_matches_dense_oracle(theta):
    _, sys = chain_system(4, theta, omega_mhz=1.0)
    g, gc = TWO_PI * 0.05, TWO_PI * 0.03
    times = output_grid(2.0, 0.25)
    tr = lindblad_evolve(sys, NoiseModel(gamma=g, gamma_c=gc), times=times, method="krylov")
    assert np.abs(tr.P - oracle_P(sys, g, gc, times)).max() < 1e-8


def test_split_step_matches_dense_oracle():
    _, sys = chain_system(4, 180.0, omega_mhz=1.0)
    g, gc = TWO_PI * 0.05, TWO_PI * 0.03
    tr = lindblad_evolve(sys, NoiseModel(gamma=g, gamma_c=gc), t_max=2.0, dt_out=0.02, max_step=0.005)
    ref = oracle_P(sys, g, gc, tr.times[::25])
    # second-order splitting error ~ tau^2 * gamma * omega^2
    assert np.abs(tr.P[::25] - ref).max() < 1e-5


def test_split_step_converges_quadratically():
    _, sys = chain_system(3, 180.0, omega_mhz=1.0)
    g = TWO_PI * 0.2
    times = np.array([0.0, 1.0])
    ref = oracle_P(sys, g, 0.0, times)[-1]
    errs = []
    for step in (0.1, 0.05):
        tr = lindblad_evolve(sys, NoiseModel(gamma=g), times=times, max_step=step)
        errs.append(np.abs(tr.P[-1] - ref).max())
    assert 3.0 < errs[0] / errs[1] < 5.0


@pytest.mark.parametrize("method", ["split", "krylov"])
def test_unitary_limit_matches_statevec(method):
    _, sys = chain_system(6, 60.0)
    ref = quench_evolve(sys, t_max=3.0, dt_out=0.05)
    tr = lindblad_evolve(sys, NoiseModel(), t_max=3.0, dt_out=0.05, method=method)
    assert np.abs(tr.f_R - ref.f_R).max() < 1e-6


def test_unitary_limit_n10(linear10):
    sys, _, ref = linear10
    tr = lindblad_evolve(sys, NoiseModel(), t_max=3.0, dt_out=0.02)
    n = len(tr.times)
    assert np.abs(tr.f_R - ref.f_R[:n]).max() < 1e-6


def test_single_atom_rabi_decay_time():
    sys = SpinSystem(np.zeros((1, 1)), TWO_PI * 1.0, 0.0)
    g = TWO_PI * 0.020
    tr = lindblad_evolve(sys, NoiseModel(gamma=g), t_max=40.0, dt_out=0.02)
    fit = rabi_decay_fit(tr, TWO_PI, tau_guess=10.0)
    assert fit["tau"] == pytest.approx(2 / g, rel=0.02)
    assert abs(fit["tau"] - 15.5) / 15.5 < 0.15


# --- density-matrix invariants -----------------------------------------------

def test_trace_and_hermiticity_n8():
    _, sys = chain_system(8, 180.0)
    noise = NoiseModel(gamma=TWO_PI * 0.02, gamma_c=TWO_PI * 0.016)
    tr = lindblad_evolve(sys, noise, t_max=3.0, dt_out=0.05)
    d = tr.diagnostics
    assert d["trace_dev"].max() < 1e-8
    assert d["herm_dev"].max() < 1e-10
    assert d["min_population"].min() >= -1e-8
    assert np.allclose(tr.P.sum(axis=1), 1.0, atol=1e-8)


@settings(max_examples=15, deadline=None)
@given(g=st.floats(0.0, 2.0), gc=st.floats(0.0, 2.0), seed=st.integers(0, 2**31))
def test_populations_frozen_without_drive(g, gc, seed):
    rng = np.random.default_rng(seed)
    _, sys = chain_system(3, 180.0)
    sys = sys.with_drive(0.0, 0.0)
    rho0 = random_rho(rng, sys.dim)
    tr = lindblad_evolve(sys, NoiseModel(gamma=g, gamma_c=gc), t_max=1.0, dt_out=0.1, rho0=rho0)
    counts = np.array([bin(k).count("1") for k in range(sys.dim)])
    P0 = np.bincount(counts, weights=rho0.diagonal().real, minlength=4)
    assert np.abs(tr.P - P0).max() < 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_positivity_from_mixed_start(seed):
    rng = np.random.default_rng(seed)
    _, sys = chain_system(3, 60.0, omega_mhz=1.5)
    noise = NoiseModel(gamma=rng.uniform(0, 2), gamma_c=rng.uniform(0, 2))
    tr = lindblad_evolve(sys, noise, t_max=2.0, dt_out=0.1, rho0=random_rho(rng, sys.dim))
    assert tr.diagnostics["min_population"].min() >= -1e-8
    assert tr.diagnostics["trace_dev"].max() < 1e-8


def test_dimension_cap():
    _, sys = chain_system(11, 180.0)
    with pytest.raises(DimensionOverflow):
        lindblad_evolve(sys, NoiseModel(), t_max=0.1, dt_out=0.05)


def test_split_needs_uniform_grid():
    _, sys = chain_system(2, 180.0)
    with pytest.raises(ValueError):
        lindblad_evolve(sys, NoiseModel(gamma=1.0), times=np.array([0.0, 0.1, 0.3]))


def test_unknown_method():
    _, sys = chain_system(2, 180.0)
    with pytest.raises(ValueError):
        lindblad_evolve(sys, NoiseModel(), t_max=0.1, dt_out=0.05, method="rk4")


# --- noise model and Monte Carlo ---------------------------------------------

@pytest.mark.parametrize("kw", [{"gamma": -1.0}, {"gamma_c": -0.1}, {"d_omega": -0.1},
                                {"d_delta": -1.0}, {"shots": 0}, {"tail_cut": 0.0}])
def test_invalid_noise(kw):
    with pytest.raises(InvalidNoise):
        NoiseModel(**kw)


def test_statevec_backend_rejects_dephasing():
    _, sys = chain_system(2, 180.0)
    with pytest.raises(InvalidNoise):
        monte_carlo_quench(sys, NoiseModel(gamma=1.0), t_max=0.1, dt_out=0.05, backend="statevec")


def test_zero_width_equals_deterministic_run():
    _, sys = chain_system(4, 180.0)
    noise = NoiseModel(gamma=0.3, gamma_c=0.1, shots=3, seed=5)
    mc = monte_carlo_quench(sys, noise, t_max=2.0, dt_out=0.05)
    single = lindblad_evolve(sys, noise, t_max=2.0, dt_out=0.05)
    assert np.abs(mc.P - single.P).max() < 1e-12


def test_shot_average_linearity():
    _, sys = chain_system(3, 180.0)
    noise = NoiseModel(d_omega=0.1, d_delta=0.1, shots=8, seed=11)
    full = monte_carlo_quench(sys, noise, t_max=1.0, dt_out=0.05, backend="statevec")
    a = monte_carlo_quench(sys, noise, t_max=1.0, dt_out=0.05, backend="statevec", shots=range(0, 3))
    b = monte_carlo_quench(sys, noise, t_max=1.0, dt_out=0.05, backend="statevec", shots=range(3, 8))
    assert np.abs(full.P - (3 * a.P + 5 * b.P) / 8).max() < 1e-12


def test_samples_independent_of_subset():
    _, sys = chain_system(2, 180.0)
    noise = NoiseModel(d_omega=0.08, d_delta=0.1, omega0=1.04, shots=10, seed=2**63 + 7)
    whole = sample_drives(noise, sys)
    part = sample_drives(noise, sys, range(4, 7))
    assert whole[4:7] == part


def test_samples_are_truncated_and_positive():
    _, sys = chain_system(1, 180.0)
    noise = NoiseModel(omega0=0.05, d_omega=0.1, d_delta=0.1, shots=2000, seed=1, tail_cut=5.0)
    draws = np.array(sample_drives(noise, sys)) / TWO_PI
    assert np.all(draws[:, 0] > 0)
    assert np.all(np.abs(draws[:, 0] - 0.05) <= 0.5 + 1e-12)
    assert np.all(np.abs(draws[:, 1]) <= 0.5 + 1e-12)


def test_parallel_matches_serial():
    _, sys = chain_system(3, 60.0)
    noise = NoiseModel(gamma=0.1, d_omega=0.08, d_delta=0.1, omega0=1.04, shots=5, seed=3)
    a = monte_carlo_quench(sys, noise, t_max=1.0, dt_out=0.05)
    b = monte_carlo_quench(sys, noise, t_max=1.0, dt_out=0.05, workers=2)
    assert np.array_equal(a.P, b.P)
    assert a.diagnostics["samples"] == b.diagnostics["samples"]


@pytest.mark.slow
def test_full_noise_damps_n10_oscillation(linear10):
    sys, _, clean = linear10
    noise = NoiseModel.paper_defaults(shots=3, seed=0)
    noisy = monte_carlo_quench(sys, noise, t_max=3.0, dt_out=0.02, max_step=0.02)

    def amplitude(tr):
        m = tr.window(2.0, 3.0)
        return tr.f_R[m].max() - tr.f_R[m].min()

    assert amplitude(noisy) < amplitude(clean)
