"""Open-system quench dynamics with dephasing and shot-to-shot drive noise.

    d rho/dt = -i [H, rho] + sum_i D[L_i] rho + D[L_c] rho
    L_i = sqrt(gamma/2) sigma_z^i,  L_c = sqrt(gamma_c/2) sum_i sigma_z^i

Both dissipators are diagonal in the product basis: element ``rho_ab`` is
damped at rate ``gamma * hamming(a, b) + gamma_c/4 * (Z_a - Z_b)^2`` where
``Z`` is the total sigma_z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la

from .hamiltonian import DimensionOverflow, SpinSystem, build_hamiltonian, diagonal, popcounts
from .statevec import ConvergenceFailure, ObservableTrace, output_grid, quench_evolve

DEFAULT_DM_CAP = 10
ARNOLDI_TOL = 1e-10


class InvalidNoise(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Dephasing rates in rad/us; Lorentzian centres and half-widths in MHz.

    ``omega0 = None`` keeps the Rabi frequency of the spin system and
    ``delta0 = None`` its detuning.
    """

    gamma: float = 0.0
    gamma_c: float = 0.0
    omega0: float | None = None
    d_omega: float = 0.0
    delta0: float | None = None
    d_delta: float = 0.0
    shots: int = 1
    seed: int = 0
    tail_cut: float = 20.0

    def __post_init__(self):
        if self.gamma < 0 or self.gamma_c < 0:
            raise InvalidNoise("dephasing rates must be non-negative")
        if self.d_omega < 0 or self.d_delta < 0:
            raise InvalidNoise("Lorentzian widths must be non-negative")
        if self.shots < 1:
            raise InvalidNoise("need at least one shot")
        if not self.tail_cut > 0:
            raise InvalidNoise("tail cut must be positive")

    @classmethod
    def paper_defaults(cls, shots: int = 64, seed: int = 0) -> "NoiseModel":
        """Tables I-II dephasing plus the fitted Lorentzian drive noise."""
        return cls(
            gamma=2 * np.pi * 0.020,
            gamma_c=2 * np.pi * 0.016,
            omega0=1.04,
            d_omega=0.08,
            delta0=0.0,
            d_delta=0.1,
            shots=shots,
            seed=seed,
        )


def dephasing_rates(N: int, gamma: float, gamma_c: float) -> np.ndarray:
    """``(2^N, 2^N)`` decay rates of the coherences (zero on the diagonal)."""
    dim = 1 << N
    idx = np.arange(dim, dtype=np.int64)
    x = idx[:, None] ^ idx[None, :]
    ham = np.zeros((dim, dim))
    for b in range(N):
        ham += (x >> b) & 1
    out = gamma * ham
    if gamma_c:
        Z = 2.0 * popcounts(N) - N
        out += 0.25 * gamma_c * (Z[:, None] - Z[None, :]) ** 2
    return out


class Liouvillian:
    """Matrix-free action of the generator on a vectorised density matrix."""

    def __init__(self, sys: SpinSystem, gamma: float = 0.0, gamma_c: float = 0.0):
        self.N = sys.N
        self.dim = sys.dim
        E = diagonal(sys)
        rates = dephasing_rates(self.N, gamma, gamma_c)
        # -i (E_a - E_b) - rate_ab, applied elementwise
        self.diag = -1j * (E[:, None] - E[None, :]) - rates
        self.half_omega = 0.5 * sys.omega

    def __call__(self, vec: np.ndarray) -> np.ndarray:
        rho = vec.reshape(self.dim, self.dim)
        out = self.diag * rho
        if self.half_omega:
            t = rho.reshape((2,) * (2 * self.N))
            acc = np.zeros_like(t)
            for axis in range(self.N):
                acc += np.flip(t, axis=axis)
                acc -= np.flip(t, axis=self.N + axis)
            out += (-1j * self.half_omega) * acc.reshape(self.dim, self.dim)
        return out.reshape(-1)


class ArnoldiPropagator:
    """exp(A t) v for a general matrix-free generator ``A``.

    Adaptive in the same way as :class:`rydtherm.statevec.LanczosPropagator`:
    the step is the longest one whose error estimate
    ``h_{m+1,m} |[exp(tau H_m)]_{m,1}|`` stays below ``tol``.
    """

    def __init__(self, matvec: Callable[[np.ndarray], np.ndarray], tol: float = ARNOLDI_TOL,
                 m_max: int = 30, min_step: float = 1e-9):
        self.matvec = matvec
        self.tol = tol
        self.m_max = m_max
        self.min_step = min_step
        self.n_steps = 0
        self.n_matvec = 0

    @staticmethod
    def _error(Hm: np.ndarray, h_next: float, tau: float) -> float:
        return abs(h_next * la.expm(tau * Hm)[-1, 0])

    def _basis(self, v: np.ndarray, horizon: float):
        beta0 = np.linalg.norm(v)
        dim = v.shape[0]
        m_cap = min(self.m_max, dim)
        Q = np.empty((m_cap + 1, dim), dtype=complex)
        Hh = np.zeros((m_cap + 1, m_cap), dtype=complex)
        Q[0] = v / beta0
        for j in range(m_cap):
            w = self.matvec(Q[j])
            self.n_matvec += 1
            for _ in range(2):
                c = (Q[: j + 1] @ w.conj()).conj()
                w -= Q[: j + 1].T @ c
                Hh[: j + 1, j] += c
            h = np.linalg.norm(w)
            Hh[j + 1, j] = h
            m = j + 1
            if h < 1e-13 * max(1.0, np.abs(Hh[: j + 1, j]).max()):
                return Q[:m], Hh[:m, :m], 0.0, beta0, True
            Q[j + 1] = w / h
            if m >= 4 and j % 2 == 1 and self._error(Hh[:m, :m], h, horizon) <= self.tol:
                return Q[:m], Hh[:m, :m], h, beta0, False
        return Q[:m_cap], Hh[:m_cap, :m_cap], Hh[m_cap, m_cap - 1].real, beta0, False

    def evolve(self, v0: np.ndarray, times: Sequence[float],
               observe: Callable[[float, np.ndarray], None]) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        v = np.array(v0, dtype=complex)
        t = 0.0
        k = 0
        while k < len(times) and times[k] <= 0.0:
            observe(times[k], v)
            k += 1
        t_end = times[-1] if len(times) else 0.0
        while t < t_end - 1e-14:
            horizon = t_end - t
            Q, Hm, h_next, beta0, exact = self._basis(v, horizon)
            if exact or self._error(Hm, h_next, horizon) <= self.tol:
                tau = horizon
            else:
                lo, hi = 0.0, horizon
                while hi - lo > 1e-6 * hi:
                    mid = 0.5 * (lo + hi)
                    if self._error(Hm, h_next, mid) <= self.tol:
                        lo = mid
                    else:
                        hi = mid
                tau = lo
                if tau < self.min_step:
                    raise ConvergenceFailure(f"Arnoldi step collapsed to {tau:.3g} us at t={t:.6g}")

            def at(s: float) -> np.ndarray:
                c = la.expm(s * Hm)[:, 0] * beta0
                return c @ Q[: len(c)]

            while k < len(times) and times[k] <= t + tau + 1e-13:
                observe(times[k], at(times[k] - t))
                k += 1
            v = at(tau)
            t += tau
            self.n_steps += 1
        return v


class SplitStepPropagator:
    """Strang splitting between the exact unitary channel and exact dephasing.

    ``rho -> G o (U (G o rho) U^dagger)`` with ``U = exp(-i H tau)`` from one
    dense diagonalisation and ``G = exp(-rates tau/2)`` elementwise.  Both
    factors are CPTP, so trace, hermiticity and positivity hold to rounding
    for any step.  The splitting error vanishes without dephasing and is
    otherwise controlled by the drive-dephasing commutator.
    """

    def __init__(self, sys: SpinSystem, gamma: float, gamma_c: float, tau: float):
        E, W = la.eigh(build_hamiltonian(sys).toarray())
        self.U = (W * np.exp(-1j * E * tau)) @ W.conj().T
        self.Uh = self.U.conj().T
        rates = dephasing_rates(sys.N, gamma, gamma_c)
        self.half = np.exp(-0.5 * tau * rates) if (gamma or gamma_c) else None
        self.tau = tau

    def step(self, rho: np.ndarray) -> np.ndarray:
        if self.half is not None:
            rho = self.half * rho
        rho = self.U @ rho @ self.Uh
        if self.half is not None:
            rho = self.half * rho
        return rho


def lindblad_evolve(
    sys: SpinSystem,
    noise: NoiseModel | None = None,
    t_max: float = 3.0,
    dt_out: float = 0.02,
    rho0: np.ndarray | None = None,
    cap: int = DEFAULT_DM_CAP,
    method: str = "split",
    max_step: float = 0.01,
    tol: float = ARNOLDI_TOL,
    times: np.ndarray | None = None,
) -> ObservableTrace:
    """Density-matrix evolution for one parameter draw.

    Only the dephasing rates of ``noise`` are used here; drive noise is
    handled by :func:`monte_carlo_quench`.  ``method='split'`` needs a
    uniform output grid starting at 0; ``method='krylov'`` integrates the
    full Liouvillian with adaptive Arnoldi steps (accurate, slow beyond N~8).
    """
    if sys.N > cap:
        raise DimensionOverflow(f"density matrix at N={sys.N} exceeds cap {cap}")
    noise = noise or NoiseModel()
    N, dim = sys.N, sys.dim
    if times is None:
        times = output_grid(t_max, dt_out)
    times = np.asarray(times, dtype=float)
    if rho0 is None:
        rho0 = np.zeros((dim, dim), dtype=complex)
        rho0[0, 0] = 1.0
    rho0 = np.asarray(rho0, dtype=complex)
    counts = popcounts(N)
    P = np.zeros((len(times), N + 1))
    trace_dev = np.zeros(len(times))
    herm_dev = np.zeros(len(times))
    min_pop = np.zeros(len(times))

    def observe(k, rho):
        pops = rho.diagonal().real
        P[k] = np.bincount(counts, weights=pops, minlength=N + 1)
        trace_dev[k] = abs(rho.trace() - 1.0)
        herm_dev[k] = np.abs(rho - rho.conj().T).max()
        min_pop[k] = pops.min()

    info: dict = {"method": method}
    if method == "split":
        if len(times) > 1:
            gaps = np.diff(times)
            if times[0] != 0.0 or np.ptp(gaps) > 1e-9 * gaps.max():
                raise ValueError("split-step evolution needs a uniform grid starting at t=0")
            if noise.gamma or noise.gamma_c:
                sub = max(1, int(np.ceil(gaps[0] / max_step - 1e-9)))
            else:
                sub = 1  # no splitting error without dephasing
            prop = SplitStepPropagator(sys, noise.gamma, noise.gamma_c, gaps[0] / sub)
        else:
            sub, prop = 0, None
        rho = rho0.copy()
        observe(0, rho)
        for k in range(1, len(times)):
            for _ in range(sub):
                rho = prop.step(rho)
            observe(k, rho)
        info.update(substeps=sub, tau=prop.tau if prop else None)
    elif method == "krylov":
        L = Liouvillian(sys, noise.gamma, noise.gamma_c)
        cursor = [0]

        def obs_vec(t, vec):
            observe(cursor[0], vec.reshape(dim, dim))
            cursor[0] += 1

        prop = ArnoldiPropagator(L, tol=tol)
        prop.evolve(rho0.reshape(-1), times, obs_vec)
        info.update(steps=prop.n_steps, matvecs=prop.n_matvec)
    else:
        raise ValueError(f"unknown method {method!r}")
    info.update(trace_dev=trace_dev, herm_dev=herm_dev, min_population=min_pop)
    return ObservableTrace.from_distribution(times, P, N, diagnostics=info)


def _truncated_lorentzian(rng: np.random.Generator, centre: float, width: float, cut: float,
                          positive: bool) -> float:
    if width == 0.0:
        return centre
    while True:
        x = rng.standard_cauchy()
        if abs(x) > cut:
            continue
        val = centre + width * x
        if positive and val <= 0.0:
            continue
        return val


def sample_drives(noise: NoiseModel, sys: SpinSystem, shots: range | None = None) -> list[tuple[float, float]]:
    """(omega, delta) in rad/us for each shot index.

    Each shot draws from its own stream keyed by ``(seed, shot)``, so a
    shot's parameters do not depend on which other shots are evaluated.
    """
    shots = range(noise.shots) if shots is None else shots
    om0 = sys.omega / (2 * np.pi) if noise.omega0 is None else noise.omega0
    de0 = sys.delta / (2 * np.pi) if noise.delta0 is None else noise.delta0
    out = []
    for s in shots:
        rng = np.random.Generator(np.random.Philox(key=[noise.seed & (2**64 - 1), s]))
        om = _truncated_lorentzian(rng, om0, noise.d_omega, noise.tail_cut, positive=om0 > 0)
        de = _truncated_lorentzian(rng, de0, noise.d_delta, noise.tail_cut, positive=False)
        out.append((2 * np.pi * om, 2 * np.pi * de))
    return out


def _pairwise_sum(arrays: list[np.ndarray]) -> np.ndarray:
    while len(arrays) > 1:
        nxt = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            nxt.append(arrays[-1])
        arrays = nxt
    return arrays[0]


def monte_carlo_quench(
    sys: SpinSystem,
    noise: NoiseModel,
    t_max: float = 3.0,
    dt_out: float = 0.02,
    backend: str = "lindblad",
    shots: range | None = None,
    workers: int = 1,
    max_step: float = 0.01,
) -> ObservableTrace:
    """Average observables over Lorentzian draws of (Omega, Delta).

    The reduction is a pairwise sum in shot order, independent of ``workers``.
    ``diagnostics['samples']`` lists the drawn parameters (MHz).
    """
    if backend not in ("lindblad", "statevec"):
        raise ValueError(f"unknown backend {backend!r}")
    shots = range(noise.shots) if shots is None else shots
    draws = sample_drives(noise, sys, shots)
    times = output_grid(t_max, dt_out)

    if backend == "statevec" and (noise.gamma or noise.gamma_c):
        raise InvalidNoise("the statevec backend cannot apply dephasing")
    jobs = [(sys, noise, times, backend, d, max_step) for d in draws]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_run_one, jobs))
    else:
        traces = [_run_one(j) for j in jobs]
    n = len(traces)
    P = _pairwise_sum([tr.P for tr in traces]) / n
    out = ObservableTrace.from_distribution(times, P, sys.N)
    out.diagnostics = {
        "backend": backend,
        "shots": [int(s) for s in shots],
        "samples": [{"shot": int(s), "omega_MHz": om / (2 * np.pi), "delta_MHz": de / (2 * np.pi)}
                    for s, (om, de) in zip(shots, draws)],
    }
    return out


def _run_one(args):
    sys, noise, times, backend, draw, max_step = args
    s = sys.with_drive(*draw)
    if backend == "lindblad":
        return lindblad_evolve(s, noise, times=times, max_step=max_step)
    return quench_evolve(s, times=times)


def samples_manifest(trace: ObservableTrace, noise: NoiseModel) -> str:
    return json.dumps({"noise": noise.__dict__, "samples": trace.diagnostics.get("samples", [])},
                      indent=2)
