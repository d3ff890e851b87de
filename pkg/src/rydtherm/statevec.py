"""Pure-state quench evolution and observable extraction."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la

from .census import BlockadeCensus
from .hamiltonian import (
    DEFAULT_DENSE_CAP,
    DimensionOverflow,
    MatrixFreeHamiltonian,
    SpinSystem,
    all_down,
    build_hamiltonian,
    popcounts,
)

KRYLOV_TOL = 1e-10


class ConvergenceFailure(RuntimeError):
    pass


class EmptyWindow(ValueError):
    pass


@dataclass
class ObservableTrace:
    """Observables sampled on a time grid (times in us).

    ``P[k, n]`` is the probability of ``n`` up spins at ``times[k]``; it
    spans ``n = 0..N`` for the quantum backends and ``0..n_max`` for the
    master equation.
    """

    times: np.ndarray
    f_R: np.ndarray
    M2: np.ndarray
    P: np.ndarray
    N: int
    Cm2: np.ndarray | None = None
    configs: list[str] | None = None
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_distribution(cls, times, P, N, **kw) -> "ObservableTrace":
        P = np.asarray(P, dtype=float)
        n = np.arange(P.shape[1])
        f_R = P @ n / N
        M2 = P @ (n.astype(float) ** 2) / N**2
        return cls(np.asarray(times, dtype=float), f_R, M2, P, N, **kw)

    def window(self, t0: float, t1: float | None = None) -> np.ndarray:
        mask = self.times >= t0 - 1e-12
        if t1 is not None:
            mask &= self.times <= t1 + 1e-12
        return mask

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_us", "f_R", "M2"] + [f"P_{n}" for n in range(self.P.shape[1])])
            for k, t in enumerate(self.times):
                w.writerow(
                    [repr(float(t)), repr(float(self.f_R[k])), repr(float(self.M2[k]))]
                    + [repr(float(p)) for p in self.P[k]]
                )

    def write_cm2_csv(self, path) -> None:
        if self.Cm2 is None or self.configs is None:
            raise ValueError("trace carries no configuration occupations")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config"] + [repr(float(t)) for t in self.times])
            for m, c in enumerate(self.configs):
                w.writerow([c] + [repr(float(v)) for v in self.Cm2[:, m]])

    @classmethod
    def read_csv(cls, path, N: int) -> "ObservableTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        if header[:3] != ["t_us", "f_R", "M2"]:
            raise ValueError(f"unexpected trace header {header[:3]}")
        return cls(body[:, 0], body[:, 1], body[:, 2], body[:, 3:], N)


@dataclass
class SteadyState:
    t_relax: float
    f_R_bar: float
    M2_bar: float
    P_eq: np.ndarray
    Cm2_eq: np.ndarray | None = None


def excitation_distribution(
    state: np.ndarray, census: BlockadeCensus | None = None, counts: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """P_n over n = 0..N and |C_m|^2 over the census configurations."""
    state = np.asarray(state)
    N = int(np.log2(state.shape[0]))
    if counts is None:
        counts = popcounts(N)
    prob = np.abs(state) ** 2
    P = np.bincount(counts, weights=prob, minlength=N + 1)
    cm2 = prob[census.indices()] if census is not None else None
    return P, cm2


def full_spectrum(sys: SpinSystem, cap: int = DEFAULT_DENSE_CAP) -> tuple[np.ndarray, np.ndarray]:
    if sys.N > cap:
        raise DimensionOverflow(f"full diagonalization at N={sys.N} exceeds cap {cap}")
    H = build_hamiltonian(sys).toarray()
    E, W = la.eigh(H)
    return E, W


class LanczosPropagator:
    """exp(-i H t) |psi> with adaptive Krylov steps.

    Each step builds a Lanczos basis (with full reorthogonalisation) and
    takes the longest time step for which the a-posteriori error estimate
    ``beta_m |[exp(-i T tau)]_{m,1}|`` stays below ``tol``.  Output times
    falling inside a step are evaluated from the same basis, so the step
    sequence does not depend on the sampling grid.
    """

    def __init__(self, matvec: Callable[[np.ndarray], np.ndarray], tol: float = KRYLOV_TOL,
                 m_max: int = 40, min_step: float = 1e-9):
        self.matvec = matvec
        self.tol = tol
        self.m_max = m_max
        self.min_step = min_step
        self.n_steps = 0
        self.n_matvec = 0

    def _basis(self, psi: np.ndarray, horizon: float):
        beta0 = np.linalg.norm(psi)
        dim = psi.shape[0]
        m_cap = min(self.m_max, dim)
        Q = np.empty((m_cap + 1, dim), dtype=complex)
        Q[0] = psi / beta0
        alpha = np.zeros(m_cap)
        beta = np.zeros(m_cap)
        for j in range(m_cap):
            w = self.matvec(Q[j])
            self.n_matvec += 1
            alpha[j] = np.vdot(Q[j], w).real
            w = w - alpha[j] * Q[j]
            if j > 0:
                w -= beta[j - 1] * Q[j - 1]
            for _ in range(2):
                w -= Q[: j + 1].T @ (Q[: j + 1].conj() @ w)
            beta[j] = np.linalg.norm(w)
            m = j + 1
            if beta[j] < 1e-13 * max(1.0, abs(alpha[j])):
                return Q[:m], alpha[:m], beta[:m], beta0, m, True
            Q[j + 1] = w / beta[j]
            if m >= 4 and self._error(alpha[:m], beta[:m], horizon) <= self.tol:
                return Q[:m], alpha[:m], beta[:m], beta0, m, False
        return Q[:m_cap], alpha, beta, beta0, m_cap, False

    @staticmethod
    def _eig(alpha, beta):
        m = len(alpha)
        if m == 1:
            return alpha.copy(), np.ones((1, 1))
        return la.eigh_tridiagonal(alpha, beta[: m - 1])

    def _error(self, alpha, beta, tau) -> float:
        lam, S = self._eig(alpha, beta)
        coeff = S[-1] @ (np.exp(-1j * lam * tau) * S[0])
        return abs(beta[len(alpha) - 1] * coeff)

    def evolve(self, psi0: np.ndarray, times: Sequence[float],
               observe: Callable[[float, np.ndarray], None]) -> np.ndarray:
        """Propagate from t=0 through the ascending ``times``, calling ``observe(t, psi)``."""
        times = np.asarray(times, dtype=float)
        psi = np.array(psi0, dtype=complex)
        t = 0.0
        k = 0
        while k < len(times) and times[k] <= 0.0:
            observe(times[k], psi)
            k += 1
        t_end = times[-1] if len(times) else 0.0
        while t < t_end - 1e-14:
            horizon = t_end - t
            Q, alpha, beta, beta0, m, exact = self._basis(psi, horizon)
            lam, S = self._eig(alpha, beta)
            if exact or self._error(alpha, beta, horizon) <= self.tol:
                tau = horizon
            else:
                lo, hi = 0.0, horizon
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    if self._error(alpha, beta, mid) <= self.tol:
                        lo = mid
                    else:
                        hi = mid
                    if hi - lo < 1e-6 * hi:
                        break
                tau = lo
                if tau < self.min_step:
                    raise ConvergenceFailure(
                        f"Krylov step collapsed to {tau:.3g} us at t={t:.6g} (m={m})"
                    )

            def at(s: float) -> np.ndarray:
                c = S @ (np.exp(-1j * lam * s) * S[0]) * beta0
                return c @ Q[: len(c)]

            while k < len(times) and times[k] <= t + tau + 1e-13:
                observe(times[k], at(times[k] - t))
                k += 1
            psi = at(tau)
            t += tau
            self.n_steps += 1
        return psi


def output_grid(t_max: float, dt_out: float) -> np.ndarray:
    n = int(round(t_max / dt_out))
    return np.arange(n + 1) * dt_out


def quench_evolve(
    sys: SpinSystem,
    t_max: float = 3.0,
    dt_out: float = 0.02,
    method: str = "expm-krylov",
    psi0: np.ndarray | None = None,
    census: BlockadeCensus | None = None,
    tol: float = KRYLOV_TOL,
    dense_cap: int = DEFAULT_DENSE_CAP,
    times: np.ndarray | None = None,
) -> ObservableTrace:
    """Unitary evolution from |down...down> (or ``psi0``) under the full Hamiltonian."""
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    N = sys.N
    if times is None:
        times = output_grid(t_max, dt_out)
    psi0 = all_down(N) if psi0 is None else np.asarray(psi0, dtype=complex)
    counts = popcounts(N)
    P = np.zeros((len(times), N + 1))
    Cm2 = np.zeros((len(times), census.D)) if census is not None else None
    norms = np.zeros(len(times))
    energies = np.zeros(len(times))
    cursor = [0]

    if method == "dense-eigen":
        E, W = full_spectrum(sys, dense_cap)
        coeffs = W.conj().T @ psi0
        for k, t in enumerate(times):
            psi = W @ (np.exp(-1j * E * t) * coeffs)
            P[k], cm = excitation_distribution(psi, census, counts)
            if Cm2 is not None:
                Cm2[k] = cm
            norms[k] = np.linalg.norm(psi)
            energies[k] = float(np.sum(E * np.abs(coeffs) ** 2))
        info = {"method": method}
    elif method == "expm-krylov":
        H = MatrixFreeHamiltonian(sys)

        def observe(t, psi):
            k = cursor[0]
            P[k], cm = excitation_distribution(psi, census, counts)
            if Cm2 is not None:
                Cm2[k] = cm
            norms[k] = np.linalg.norm(psi)
            energies[k] = np.vdot(psi, H(psi)).real
            cursor[0] += 1

        prop = LanczosPropagator(H, tol=tol)
        prop.evolve(psi0, times, observe)
        info = {"method": method, "krylov_steps": prop.n_steps, "matvecs": prop.n_matvec}
    else:
        raise ValueError(f"unknown method {method!r}")

    info.update(norm=norms, energy=energies)
    return ObservableTrace.from_distribution(
        times, P, N, Cm2=Cm2, configs=list(census.configs) if census is not None else None,
        diagnostics=info,
    )


def steady_average(trace: ObservableTrace, t_relax: float, t_end: float | None = None) -> SteadyState:
    """Arithmetic means over samples with ``t_relax <= t <= t_end``."""
    mask = trace.window(t_relax, t_end)
    if not mask.any():
        raise EmptyWindow(f"no samples at t >= {t_relax}")
    Cm2_eq = trace.Cm2[mask].mean(axis=0) if trace.Cm2 is not None else None
    return SteadyState(
        t_relax,
        float(trace.f_R[mask].mean()),
        float(trace.M2[mask].mean()),
        trace.P[mask].mean(axis=0),
        Cm2_eq,
    )


def default_t_relax(theta: float) -> float:
    """2 us for the straight chain, 1.5 us at 60 degrees, linear in between."""
    if theta >= 180.0:
        return 2.0
    if theta <= 60.0:
        return 1.5
    return 1.5 + 0.5 * (theta - 60.0) / 120.0
