"""Post-processing: spectral peaks, scaling fits, ETH diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.optimize import curve_fit
from scipy.signal import find_peaks

from .geometry import effective_density
from .hamiltonian import (
    DEFAULT_DENSE_CAP,
    DimensionOverflow,
    SpinSystem,
    build_hamiltonian,
    dense_hamiltonian,
    site_occupation,
)
from .statevec import ObservableTrace

MIN_WINDOW_SAMPLES = 16
MIN_BINS = 25


class WindowTooShort(ValueError):
    pass


class InsufficientPoints(ValueError):
    pass


class NonpositiveValue(ValueError):
    pass


def dominant_frequency(trace: ObservableTrace, window: tuple[float, float] = (0.0, 3.0),
                       pad: int = 16) -> float:
    """Largest nonzero-frequency periodogram peak of f_R in ``window`` (MHz).

    The series is mean-subtracted and zero-padded ``pad``-fold; the peak bin
    is refined by a parabola through the log power of its neighbours.
    """
    mask = trace.window(*window)
    t = trace.times[mask]
    y = trace.f_R[mask]
    if len(t) < MIN_WINDOW_SAMPLES:
        raise WindowTooShort(f"{len(t)} samples in window, need {MIN_WINDOW_SAMPLES}")
    dt = float(np.median(np.diff(t)))
    if not np.allclose(np.diff(t), dt, rtol=1e-6, atol=1e-9):
        raise ValueError("dominant_frequency needs uniformly sampled data")
    y = y - y.mean()
    n_fft = 1 << int(math.ceil(math.log2(len(y) * pad)))
    power = np.abs(np.fft.rfft(y, n_fft)) ** 2
    freqs = np.fft.rfftfreq(n_fft, dt)
    peaks, _ = find_peaks(power)
    peaks = peaks[peaks > 0]
    if len(peaks) == 0:
        raise ValueError("no oscillation found in window")
    k = int(peaks[np.argmax(power[peaks])])
    a, b, c = np.log(power[k - 1 : k + 2] + 1e-300)
    denom = a - 2 * b + c
    shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
    return float(freqs[k] + shift * (freqs[1] - freqs[0]))


@dataclass(frozen=True)
class ScalingPoint:
    alpha: float
    f_R_bar: float
    theta: float | None = None
    N: int | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise NonpositiveValue(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.f_R_bar <= 1.0:
            raise ValueError(f"f_R_bar outside [0, 1]: {self.f_R_bar}")


def scaling_alpha(omega_mhz: float, theta: float, d: float, C6: float = 470.0) -> float:
    """Dimensionless Omega / (|C6| n_eff^6) with C6 in GHz um^6."""
    n_eff = effective_density(theta, d)
    return omega_mhz / (abs(C6) * 1e3 * n_eff**6)


def scaling_fit(points: list[ScalingPoint], level: float = 0.95) -> tuple[float, tuple[float, float]]:
    """Slope of log f_R_bar against log alpha with a t-based confidence interval."""
    alpha = np.array([p.alpha for p in points], dtype=float)
    f = np.array([p.f_R_bar for p in points], dtype=float)
    if len(np.unique(alpha)) < 3:
        raise InsufficientPoints("need at least 3 distinct alpha values")
    if np.any(f <= 0):
        raise NonpositiveValue("f_R_bar must be positive for a log fit")
    res = stats.linregress(np.log(alpha), np.log(f))
    dof = len(alpha) - 2
    half = stats.t.ppf(0.5 + level / 2, dof) * res.stderr
    return float(res.slope), (float(res.slope - half), float(res.slope + half))


def write_scaling_csv(points: list[ScalingPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta_deg", "N", "alpha", "f_R_bar"])
        for p in points:
            w.writerow([p.theta, p.N, repr(p.alpha), repr(p.f_R_bar)])


@dataclass
class EthDiagnostics:
    E_alpha: np.ndarray
    n_diag: np.ndarray
    weights: np.ndarray
    bin_edges: np.ndarray
    rho_E: np.ndarray
    mean_E: float
    sigma_E: float
    site: int

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def histogram_moments(self) -> tuple[float, float]:
        c = self.bin_centers
        m = float(np.sum(self.rho_E * c))
        return m, float(np.sqrt(np.sum(self.rho_E * (c - m) ** 2)))

    def scatter(self, half_width: float) -> float:
        """Sample std of n_diag over eigenstates with |E - mean_E| <= half_width."""
        sel = np.abs(self.E_alpha - self.mean_E) <= half_width
        if sel.sum() < 2:
            return 0.0
        return float(np.std(self.n_diag[sel], ddof=1))

    def write_csv(self, eigen_path, rho_path) -> None:
        with open(eigen_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["E_alpha", "n_diag", "weight"])
            for e, n, p in zip(self.E_alpha, self.n_diag, self.weights):
                w.writerow([repr(float(e)), repr(float(n)), repr(float(p))])
        with open(rho_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "rho"])
            for c, r in zip(self.bin_centers, self.rho_E):
                w.writerow([repr(float(c)), repr(float(r))])


def _weighted_quantile(x, w, q):
    order = np.argsort(x)
    cw = np.cumsum(w[order])
    return np.interp(q * cw[-1], cw, x[order])


def weighted_fd_edges(x: np.ndarray, w: np.ndarray, min_bins: int = MIN_BINS,
                      max_bins: int = 20000) -> np.ndarray:
    """Freedman-Diaconis edges for a weighted sample.

    The IQR uses weighted quantiles; the sample size is the number of points.
    The range covers every point with non-negligible weight.
    """
    w = w / w.sum()
    support = x[w > 1e-14 * w.max()]
    lo, hi = float(support.min()), float(support.max())
    if hi <= lo:
        hi = lo + 1.0
    iqr = _weighted_quantile(x, w, 0.75) - _weighted_quantile(x, w, 0.25)
    width = 2.0 * iqr * len(x) ** (-1.0 / 3.0)
    bins = min_bins if width <= 0 else int(math.ceil((hi - lo) / width))
    bins = int(np.clip(bins, min_bins, max_bins))
    return np.linspace(lo, hi, bins + 1)


def eth_diagnostics(sys: SpinSystem, site: int | None = None,
                    cap: int = DEFAULT_DENSE_CAP) -> EthDiagnostics:
    """Diagonal-ensemble data of the quench from |down...down>."""
    N = sys.N
    if N > cap:
        raise DimensionOverflow(f"N={N} exceeds dense cap {cap}")
    site = N // 2 if site is None else int(site)
    if not 0 <= site < N:
        raise IndexError(f"site {site} outside chain of {N}")
    E, U = np.linalg.eigh(dense_hamiltonian(sys, cap))
    weights = np.abs(U[0, :]) ** 2
    n_op = site_occupation(N, site).astype(float)
    n_diag = np.clip(n_op @ (np.abs(U) ** 2), 0.0, 1.0)

    H = build_hamiltonian(sys)
    psi = np.zeros(sys.dim)
    psi[0] = 1.0
    h_psi = H @ psi
    mean = float(psi @ h_psi)
    sigma = float(math.sqrt(max(h_psi @ h_psi - mean**2, 0.0)))

    edges = weighted_fd_edges(E, weights)
    rho, _ = np.histogram(E, bins=edges, weights=weights)
    rho = rho / rho.sum()
    return EthDiagnostics(E, n_diag, weights, edges, rho, mean, sigma, site)


def rabi_decay_fit(trace: ObservableTrace, omega_guess: float, series: np.ndarray | None = None,
                   tau_guess: float = 3.0) -> dict:
    """Fit ``A - B cos(w t + phi) exp(-t/tau)`` and return the parameters.

    ``omega_guess`` is angular (rad/us); ``series`` defaults to f_R.
    """
    y = trace.f_R if series is None else np.asarray(series)
    t = trace.times

    def model(t, A, B, w, phi, tau):
        return A - B * np.cos(w * t + phi) * np.exp(-t / tau)

    p0 = [float(y.mean()), float(y.mean()), omega_guess, 0.0, tau_guess]
    p, _ = curve_fit(model, t, y, p0=p0, maxfev=20000)
    resid = float(np.sqrt(np.mean((model(t, *p) - y) ** 2)))
    return {"A": p[0], "B": p[1], "omega": p[2], "phi": p[3], "tau": abs(p[4]), "rms": resid}


def running_average(trace: ObservableTrace, width: float) -> np.ndarray:
    """Trailing boxcar mean of f_R over ``[t - width, t]`` (shorter near t = 0)."""
    t, y = trace.times, trace.f_R
    c = np.concatenate([[0.0], np.cumsum(y)])
    lo = np.searchsorted(t, t - width - 1e-12, side="left")
    hi = np.arange(1, len(t) + 1)
    return (c[hi] - c[lo]) / (hi - lo)


def interior_maxima(y: np.ndarray, prominence: float = 1e-3) -> np.ndarray:
    """Indices of interior local maxima with at least ``prominence``."""
    peaks, _ = find_peaks(np.asarray(y, dtype=float), prominence=prominence)
    return peaks
