"""Birth-death master equation over the number of up spins.

Rates are linear in time, ``Gamma_{n->n+-1}(t) = 2 Omega^2 t T_{n->n+-1}``,
with ``T`` constant.  Substituting ``s = Omega^2 t^2`` turns the equation into
``dP/ds = Q P`` with a constant generator, so the solution is
``P(t) = expm(Q Omega^2 t^2) P(0)`` without any time stepping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import least_squares

from .statevec import ObservableTrace

RATIO_EPS = 1e-6


class DegenerateDistribution(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class FitFailure(RuntimeError):
    pass


@dataclass
class BalanceRatios:
    """``ratios[n-1] = Gamma_{n->n-1} / Gamma_{n-1->n} = P_eq[n-1] / P_eq[n]``."""

    ratios: np.ndarray
    provenance: str = "measured"
    defined: np.ndarray | None = None

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=float)
        if self.defined is None:
            self.defined = np.isfinite(self.ratios)

    @property
    def n_max(self) -> int:
        return len(self.ratios)

    def with_fallback(self, nu) -> "BalanceRatios":
        """Replace undefined entries by the census ratio nu[n-1]/nu[n]."""
        nu = np.asarray(nu, dtype=float)[: self.n_max + 1]
        theory = nu[:-1] / nu[1:]
        r = np.where(self.defined, self.ratios, theory[: self.n_max])
        return BalanceRatios(r, self.provenance, self.defined.copy())


@dataclass
class MasterEquationModel:
    N: int
    omega: float
    T_up: np.ndarray
    T_down: np.ndarray
    ratios: np.ndarray | None = None
    fit_residual: float | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.T_up = np.asarray(self.T_up, dtype=float)
        self.T_down = np.asarray(self.T_down, dtype=float)
        if self.T_up.shape != self.T_down.shape:
            raise ValueError("need one down coefficient per up coefficient")
        if np.any(self.T_up < 0) or np.any(self.T_down < 0):
            raise ValueError("rate coefficients must be non-negative")

    @property
    def n_max(self) -> int:
        return len(self.T_up)

    @classmethod
    def from_balance(cls, N, omega, T_up, ratios: BalanceRatios, **kw) -> "MasterEquationModel":
        T_up = np.asarray(T_up, dtype=float)
        return cls(N, omega, T_up, T_up * ratios.ratios, ratios=ratios.ratios.copy(), **kw)

    def generator(self) -> np.ndarray:
        """Constant generator ``Q`` in the rescaled time ``s = Omega^2 t^2``.

        ``Gamma dt = 2 Omega^2 t T dt = T ds``.
        """
        n = self.n_max + 1
        Q = np.zeros((n, n))
        for k in range(self.n_max):
            Q[k + 1, k] += self.T_up[k]
            Q[k, k] -= self.T_up[k]
            Q[k, k + 1] += self.T_down[k]
            Q[k + 1, k + 1] -= self.T_down[k]
        return Q

    def rates(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        scale = 2.0 * self.omega**2 * t
        return scale * self.T_up, scale * self.T_down

    def stationary(self) -> np.ndarray:
        """Detailed-balance fixed point, built outward from n = 0."""
        w = [1.0]
        for k in range(self.n_max):
            if self.T_down[k] == 0.0:
                w.append(0.0 if self.T_up[k] == 0.0 else np.inf)
            else:
                w.append(w[-1] * self.T_up[k] / self.T_down[k])
        w = np.asarray(w)
        if np.isinf(w).any():
            out = np.isinf(w).astype(float)
            return out / out.sum()
        return w / w.sum()

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "n_max": self.n_max,
            "omega_MHz": self.omega / (2 * np.pi),
            "T_up": self.T_up.tolist(),
            "T_down": self.T_down.tolist(),
            "ratios": None if self.ratios is None else self.ratios.tolist(),
            "fit_residual": self.fit_residual,
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MasterEquationModel":
        ratios = d.get("ratios")
        return cls(
            int(d["N"]),
            2 * np.pi * float(d["omega_MHz"]),
            d["T_up"],
            d["T_down"],
            ratios=None if ratios is None else np.asarray(ratios, dtype=float),
            fit_residual=d.get("fit_residual"),
            flags=list(d.get("flags", [])),
        )


def balance_ratios(P_eq, eps: float = RATIO_EPS) -> BalanceRatios:
    """Detailed-balance ratios from a steady distribution over n = 0..n_max."""
    P = np.asarray(P_eq, dtype=float)
    if np.any(P < -1e-12):
        raise ValueError("steady distribution has negative entries")
    if np.count_nonzero(P > eps) < 2:
        raise DegenerateDistribution("need at least two populated sectors")
    num, den = P[:-1], P[1:]
    defined = (den > eps) & (num > eps)
    r = np.full(len(den), np.nan)
    r[defined] = num[defined] / den[defined]
    return BalanceRatios(r, "measured", defined)


def theoretical_ratios(nu) -> BalanceRatios:
    nu = np.asarray(nu, dtype=float)
    return BalanceRatios(nu[:-1] / nu[1:], "theoretical")


def integrate_master(model: MasterEquationModel, P0, times) -> ObservableTrace:
    P0 = np.asarray(P0, dtype=float)
    if P0.shape != (model.n_max + 1,):
        raise ValueError(f"initial distribution must have {model.n_max + 1} entries")
    if abs(P0.sum() - 1.0) > 1e-9:
        raise ValueError("initial distribution is not normalized")
    times = np.asarray(times, dtype=float)
    Q = model.generator()
    P = np.empty((len(times), len(P0)))
    for k, t in enumerate(times):
        P[k] = expm(Q * (model.omega * t) ** 2) @ P0
    np.clip(P, 0.0, None, out=P)
    return ObservableTrace.from_distribution(times, P, model.N, diagnostics={"source": "master"})


def census_rate_guess(nu) -> np.ndarray:
    """Up-rate coefficients of uniform single-flip hopping on the census graph.

    Layer n+1 holds (n+1) nu[n+1] links down to layer n; each link carries
    ``1/4`` (so that ``P_1 ~ N Omega^2 t^2 / 4`` at short times).
    """
    nu = np.asarray(nu, dtype=float)
    n = np.arange(len(nu) - 1)
    return (n + 1) * nu[1:] / (4.0 * nu[:-1])


def fit_rates(
    times,
    P_t,
    ratios: BalanceRatios,
    omega: float,
    N: int,
    guess=None,
    restarts: int = 5,
    seed: int = 0,
    max_residual: float = 0.2,
    floor: float = 1e-9,
    ridge: float = 1e-4,
) -> MasterEquationModel:
    """Least-squares fit of the up coefficients to early-time P_n(t).

    ``P_t[k, n]`` for ``n = 0..n_max`` (extra columns are summed into the
    last sector).  Down coefficients follow from the ratios.  Restarts
    perturb ``guess`` multiplicatively; the lowest residual wins, ties going
    to the earlier restart.  A weak ridge term (``ridge`` times the
    coefficients in units of the guess) sends coefficients the data cannot
    see, e.g. rates out of never-populated sectors, to the floor.
    """
    times = np.asarray(times, dtype=float)
    P_t = np.asarray(P_t, dtype=float)
    if len(times) < 5:
        raise InsufficientData(f"need at least 5 time samples, got {len(times)}")
    if not np.all(np.isfinite(ratios.ratios)):
        raise ValueError("undefined ratios; apply BalanceRatios.with_fallback first")
    n_max = ratios.n_max
    if P_t.shape[1] > n_max + 1:
        P_t = np.column_stack([P_t[:, :n_max], P_t[:, n_max:].sum(axis=1)])
    P0 = np.zeros(n_max + 1)
    P0[0] = 1.0
    r = ratios.ratios
    s = (omega * times) ** 2

    def predict(T_up):
        m = MasterEquationModel(N, omega, T_up, T_up * r)
        Q = m.generator()
        return np.array([expm(Q * sk) @ P0 for sk in s])

    x0 = np.full(n_max, float(N) / 4.0) if guess is None else np.asarray(guess, dtype=float)
    scale = np.maximum(x0, 1e-3)

    def resid(x):
        return np.concatenate([(predict(x) - P_t).ravel(), ridge * x / scale])

    def rms_of(x):
        return float(np.sqrt(np.mean((predict(x) - P_t) ** 2)))

    rng = np.random.default_rng(seed)
    best = None
    for k in range(restarts):
        start = x0 if k == 0 else x0 * np.exp(rng.normal(0.0, 0.5, size=n_max))
        start = np.maximum(start, 2 * floor)
        sol = least_squares(resid, start, bounds=(floor, np.inf), x_scale=scale,
                            xtol=1e-12, ftol=1e-12, gtol=1e-12)
        rms = rms_of(sol.x)
        if sol.status <= 0:
            continue
        if best is None or rms < best[0]:
            best = (rms, sol.x)
    if best is None:
        raise FitFailure("optimizer did not converge from any start")
    rms, T_up = best
    if rms > max_residual:
        raise FitFailure(f"fit residual {rms:.3g} exceeds {max_residual}")
    model = MasterEquationModel.from_balance(N, omega, T_up, ratios, fit_residual=rms)
    if not ratios.defined.all():
        model.flags.append("ratio-fallback")
    return model
