"""Matrix product state evolution of the reduced chain Hamiltonian.

    H = sum_i V_{i,i+1} n_i n_{i+1} + sum_i V_{i,i+2} n_i n_{i+2}
        + (Omega/2) sum_i sigma_x^i - (Delta/2) sum_i sigma_z^i

One time step is the symmetric split exp(-i h_x dt/2) exp(-i h_z dt)
exp(-i h_x dt/2).  The x part is a product of single-site rotations; the
diagonal part is an exact MPO of bond dimension 4 whose bond carries the
occupations of the two previous sites.  After the MPO the state is
compressed back to ``chi_max`` (truncated-SVD guess, then two-site
variational sweeps).

Tensor legs: MPS ``(left, phys, right)``; MPO ``(left, out, in, right)``.
Physical index 1 is the Rydberg (up) state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import SpinSystem
from .statevec import ObservableTrace, output_grid

OMEGA_DT = 0.013
DEFAULT_CUTOFF = 1e-13


class NoConvergence(RuntimeError):
    pass


class TruncationOverflow(RuntimeError):
    pass


@dataclass
class MPS:
    tensors: list[np.ndarray]
    form: str | None = None  # "left", "right" or None

    @classmethod
    def product(cls, bits) -> "MPS":
        tensors = []
        for b in bits:
            A = np.zeros((1, 2, 1), dtype=complex)
            A[0, int(b), 0] = 1.0
            tensors.append(A)
        return cls(tensors, "right")

    @classmethod
    def from_dense(cls, psi: np.ndarray, chi_max: int | None = None) -> "MPS":
        """Exact (or truncated) left-to-right SVD decomposition of a state vector."""
        N = int(round(math.log2(psi.shape[0])))
        tensors = []
        rest = np.asarray(psi, dtype=complex).reshape(1, -1)
        for _ in range(N - 1):
            chi_l = rest.shape[0]
            U, S, Vh = np.linalg.svd(rest.reshape(chi_l * 2, -1), full_matrices=False)
            k = _keep(S, chi_max, DEFAULT_CUTOFF)
            tensors.append(U[:, :k].reshape(chi_l, 2, k))
            rest = S[:k, None] * Vh[:k]
        tensors.append(rest.reshape(rest.shape[0], 2, 1))
        return cls(tensors, "left")

    @property
    def N(self) -> int:
        return len(self.tensors)

    @property
    def bond_dims(self) -> list[int]:
        return [1] + [A.shape[2] for A in self.tensors]

    def copy(self) -> "MPS":
        return MPS([A.copy() for A in self.tensors], self.form)

    def to_dense(self) -> np.ndarray:
        out = np.ones((1, 1), dtype=complex)
        for A in self.tensors:
            out = np.einsum("xa,asb->xsb", out, A).reshape(-1, A.shape[2])
        return out[:, 0]

    def overlap(self, other: "MPS") -> complex:
        """<self|other>."""
        E = np.ones((1, 1), dtype=complex)
        for A, B in zip(self.tensors, other.tensors):
            E = np.einsum("ac,asb,csd->bd", E, A.conj(), B, optimize=True)
        return complex(E[0, 0])

    def norm(self) -> float:
        return math.sqrt(max(self.overlap(self).real, 0.0))

    def normalize(self) -> float:
        nrm = self.norm()
        if self.form == "right":
            self.tensors[0] = self.tensors[0] / nrm
        else:
            self.tensors[-1] = self.tensors[-1] / nrm
        return nrm

    def left_canonicalize(self) -> None:
        for i in range(self.N - 1):
            A = self.tensors[i]
            chi_l, d, chi_r = A.shape
            Q, R = np.linalg.qr(A.reshape(chi_l * d, chi_r))
            self.tensors[i] = Q.reshape(chi_l, d, Q.shape[1])
            self.tensors[i + 1] = np.einsum("ab,bsc->asc", R, self.tensors[i + 1])
        self.form = "left"

    def apply_site(self, i: int, op: np.ndarray) -> None:
        """Apply a one-site operator in place; canonical form is kept for unitaries."""
        self.tensors[i] = np.einsum("ts,asb->atb", op, self.tensors[i])


@dataclass
class MPO:
    tensors: list[np.ndarray]

    @classmethod
    def identity(cls, N: int) -> "MPO":
        W = np.eye(2, dtype=complex).reshape(1, 2, 2, 1)
        return cls([W.copy() for _ in range(N)])

    @property
    def N(self) -> int:
        return len(self.tensors)

    def to_dense(self) -> np.ndarray:
        out = np.ones((1, 1, 1), dtype=complex)
        for W in self.tensors:
            out = np.einsum("xyl,lstr->xsytr", out, W)
            a, s, b, t, r = out.shape
            out = out.reshape(a * s, b * t, r)
        return out[:, :, 0]


def apply_mpo(mpo: MPO, psi: MPS) -> MPS:
    """Exact MPO-MPS product; bond dimensions multiply."""
    out = []
    for W, A in zip(mpo.tensors, psi.tensors):
        C = np.einsum("lstr,asb->altbr", W, A)
        a, l, t, b, r = C.shape
        out.append(C.reshape(a * l, t, b * r))
    return MPS(out, None)


def _keep(S: np.ndarray, chi_max: int | None, cutoff: float) -> int:
    if S.size == 0 or S[0] == 0.0:
        return 1
    k = int(np.count_nonzero(S > cutoff * S[0]))
    k = max(k, 1)
    if chi_max is not None:
        k = min(k, chi_max)
    return k


def half_x_rotation(omega: float, dt: float) -> np.ndarray:
    """exp(-i (Omega/2) sigma_x dt/2)."""
    a = 0.25 * omega * dt
    return np.array([[math.cos(a), -1j * math.sin(a)], [-1j * math.sin(a), math.cos(a)]])


def zz_mpo(sys: SpinSystem, dt: float) -> MPO:
    """Exact bond-4 MPO of exp(-i h_z dt) for nearest and next-nearest couplings.

    Left bond index ``2a + b`` holds the occupations ``(n_{i-2}, n_{i-1})``;
    the right bond passes on ``(n_{i-1}, n_i)``.  Couplings beyond range two
    in ``sys.V`` are ignored.
    """
    N = sys.N
    V = sys.V
    tensors = []
    for i in range(N):
        v1 = V[i, i - 1] if i >= 1 else 0.0
        v2 = V[i, i - 2] if i >= 2 else 0.0
        W = np.zeros((4, 2, 2, 4), dtype=complex)
        for a in (0, 1):
            for b in (0, 1):
                for s in (0, 1):
                    energy = v1 * b * s + v2 * a * s - 0.5 * sys.delta * (2 * s - 1)
                    W[2 * a + b, s, s, 2 * b + s] = np.exp(-1j * dt * energy)
        if i == 0:
            W = W[:1]
        if i == N - 1:
            W = W.sum(axis=3, keepdims=True)
        tensors.append(W)
    return MPO(tensors)


def trotter_step_mpo(sys: SpinSystem, dt: float) -> tuple[np.ndarray, MPO]:
    """(single-site half rotation, MPO of the diagonal part) for one step."""
    if not dt > 0:
        raise ValueError(f"invalid time step {dt}")
    return half_x_rotation(sys.omega, dt), zz_mpo(sys, dt)


def _svd_guess(phi: MPS, chi_max: int, cutoff: float) -> tuple[MPS, float]:
    """Right-canonical truncated-SVD approximation and its discarded weight."""
    work = phi.copy()
    work.left_canonicalize()
    T = work.tensors
    discarded = 0.0
    total = np.linalg.norm(T[-1]) ** 2
    for i in range(work.N - 1, 0, -1):
        chi_l, d, chi_r = T[i].shape
        U, S, Vh = np.linalg.svd(T[i].reshape(chi_l, d * chi_r), full_matrices=False)
        k = _keep(S, chi_max, cutoff)
        discarded += float(np.sum(S[k:] ** 2))
        T[i] = Vh[:k].reshape(k, d, chi_r)
        T[i - 1] = np.einsum("asb,bk->ask", T[i - 1], U[:, :k] * S[:k])
    work.form = "right"
    return work, discarded / total if total > 0 else 0.0


def variational_compress(
    phi: MPS,
    chi_max: int,
    tol: float = 1e-10,
    max_sweeps: int = 50,
    cutoff: float = DEFAULT_CUTOFF,
) -> tuple[MPS, dict]:
    """Approximate ``phi`` by an MPS with bonds <= ``chi_max``.

    Starts from the truncated-SVD guess and runs two-site sweeps maximising
    ``|<psi|phi>| / (|psi| |phi|)`` until a sweep improves it by less than
    ``tol``.  The result is not normalised; it is right-canonical with the
    norm on site 0.
    """
    if chi_max < 1:
        raise ValueError("chi_max must be at least 1")
    phi_norm = phi.norm()
    psi, discarded = _svd_guess(phi, chi_max, cutoff)
    if discarded <= tol or phi.N < 2:
        fid = abs(psi.overlap(phi)) / (psi.norm() * phi_norm)
        return psi, {"fidelity": fid, "sweeps": 0, "discarded": discarded}

    N = phi.N
    P, F = psi.tensors, phi.tensors
    one = np.ones((1, 1), dtype=complex)
    Lenv: list[np.ndarray | None] = [one] + [None] * N
    Renv: list[np.ndarray | None] = [None] * N + [one]
    for j in range(N - 1, 1, -1):
        Renv[j] = np.einsum("asb,csd,bd->ac", P[j].conj(), F[j], Renv[j + 1], optimize=True)

    def two_site(i):
        return np.einsum("ac,csd,dte,be->astb", Lenv[i], F[i], F[i + 1], Renv[i + 2], optimize=True)

    prev = abs(psi.overlap(phi)) / (psi.norm() * phi_norm)
    fid = prev
    for sweep in range(1, max_sweeps + 1):
        for i in range(N - 1):
            M = two_site(i)
            a, s, t, b = M.shape
            U, S, Vh = np.linalg.svd(M.reshape(a * s, t * b), full_matrices=False)
            k = _keep(S, chi_max, cutoff)
            P[i] = U[:, :k].reshape(a, s, k)
            P[i + 1] = (S[:k, None] * Vh[:k]).reshape(k, t, b)
            Lenv[i + 1] = np.einsum("ac,asb,csd->bd", Lenv[i], P[i].conj(), F[i], optimize=True)
        for i in range(N - 2, -1, -1):
            M = two_site(i)
            a, s, t, b = M.shape
            U, S, Vh = np.linalg.svd(M.reshape(a * s, t * b), full_matrices=False)
            k = _keep(S, chi_max, cutoff)
            P[i + 1] = Vh[:k].reshape(k, t, b)
            P[i] = (U[:, :k] * S[:k]).reshape(a, s, k)
            Renv[i + 1] = np.einsum("asb,csd,bd->ac", P[i + 1].conj(), F[i + 1], Renv[i + 2],
                                    optimize=True)
            kept = S[:k]
        # psi is right-canonical around site 0: <psi|phi> = |psi|^2 = sum kept s^2
        fid = float(np.sqrt(np.sum(kept**2)) / phi_norm)
        if abs(fid - prev) < tol:
            psi.form = "right"
            return psi, {"fidelity": fid, "sweeps": sweep, "discarded": discarded}
        prev = fid
    raise NoConvergence(f"compression did not converge in {max_sweeps} sweeps (fidelity {fid})")


def number_distribution(psi: MPS) -> np.ndarray:
    """P_n, n = 0..N, from the generating function <prod_j (1 + (e^{i phi} - 1) n_j)>.

    Evaluated at N+1 equally spaced angles and inverted by a discrete
    Fourier transform.
    """
    N = psi.N
    K = N + 1
    phases = np.exp(2j * np.pi * np.arange(K) / K)
    w = np.stack([np.ones(K, dtype=complex), phases], axis=1)  # (K, 2)
    E = np.ones((K, 1, 1), dtype=complex)
    for A in psi.tensors:
        T = np.einsum("kac,csd->kasd", E, A, optimize=True) * w[:, None, :, None]
        E = np.einsum("asb,kasd->kbd", A.conj(), T, optimize=True)
    G = E[:, 0, 0]
    P = np.fft.fft(G).real / K  # sum_k G_k e^{-2 pi i k n / K}
    P = np.clip(P, 0.0, 1.0)
    return P


def site_occupations(psi: MPS) -> np.ndarray:
    """<n_i> for every site (state need not be normalised)."""
    N = psi.N
    T = psi.tensors
    left = [np.ones((1, 1), dtype=complex)]
    for A in T[:-1]:
        left.append(np.einsum("ac,asb,csd->bd", left[-1], A.conj(), A, optimize=True))
    right = np.ones((1, 1), dtype=complex)
    out = np.zeros(N)
    norm2 = None
    for i in range(N - 1, -1, -1):
        A = T[i]
        up = np.einsum("ac,ab,cd,bd->", left[i], A[:, 1, :].conj(), A[:, 1, :], right, optimize=True)
        out[i] = up.real
        right = np.einsum("asb,csd,bd->ac", A.conj(), A, right, optimize=True)
        if i == 0:
            norm2 = right[0, 0].real
    return out / norm2


@dataclass
class TEBDResult:
    trace: ObservableTrace
    psi: MPS
    bond_log: list[dict] = field(default_factory=list)

    def bond_log_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.bond_log)


def tebd_evolve(
    sys: SpinSystem,
    t_max: float = 3.0,
    dt_out: float = 0.02,
    chi_max: int = 64,
    omega_dt: float = OMEGA_DT,
    tol: float = 1e-10,
    max_sweeps: int = 50,
    psi0: MPS | None = None,
    return_state: bool = False,
    max_norm_loss: float | None = None,
):
    """TEBD from |down...down> with ``Omega dt <= omega_dt``.

    The output grid is subdivided so that every sample falls on a step
    boundary.  ``diagnostics['norm_before']`` records the norm after each
    output interval's last compression, before renormalisation.
    """
    N = sys.N
    times = output_grid(t_max, dt_out)
    if sys.omega > 0:
        sub = max(1, math.ceil(sys.omega * dt_out / omega_dt - 1e-9))
    else:
        sub = 1
    dt = dt_out / sub
    rot, W = trotter_step_mpo(sys, dt)
    psi = MPS.product([0] * N) if psi0 is None else psi0.copy()

    P = np.zeros((len(times), N + 1))
    norm_before = np.ones(len(times))
    min_fid = np.ones(len(times))
    bond_log = []
    P[0] = number_distribution(psi)
    for k in range(1, len(times)):
        worst = 1.0
        for _ in range(sub):
            for i in range(N):
                psi.apply_site(i, rot)
            psi, info = variational_compress(apply_mpo(W, psi), chi_max, tol, max_sweeps)
            worst = min(worst, info["fidelity"])
            for i in range(N):
                psi.apply_site(i, rot)
            nrm = psi.normalize()
            if max_norm_loss is not None and 1.0 - nrm > max_norm_loss:
                raise TruncationOverflow(
                    f"norm loss {1.0 - nrm:.3g} at chi_max={chi_max} exceeds {max_norm_loss}")
        norm_before[k] = nrm
        min_fid[k] = worst
        P[k] = number_distribution(psi)
        bond_log.append({"t_us": float(times[k]), "bonds": psi.bond_dims, "fidelity": worst})
    trace = ObservableTrace.from_distribution(
        times, P, N,
        diagnostics={"method": "tebd", "dt": dt, "substeps": sub, "chi_max": chi_max,
                     "norm_before": norm_before, "min_fidelity": min_fid},
    )
    if return_state:
        return TEBDResult(trace, psi, bond_log)
    return trace
