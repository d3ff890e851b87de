"""Ising-like Rydberg chain Hamiltonian in the 2^N product basis.

    H = sum_{i>j} V_ij n_i n_j + (Omega/2) sum_i sigma_x^i - (Delta/2) sum_i sigma_z^i

Basis index = integer value of the occupation bitstring with site 1 as the
most significant bit (1 = Rydberg / spin up).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import InteractionMatrix

DEFAULT_DENSE_CAP = 14


class DimensionOverflow(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SpinSystem:
    """Interaction matrix plus drive.  ``omega`` and ``delta`` in rad/us."""

    V: np.ndarray
    omega: float
    delta: float = 0.0

    def __post_init__(self):
        V = np.asarray(self.V.V if isinstance(self.V, InteractionMatrix) else self.V, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise ValueError("interaction matrix must be square")
        if self.omega < 0:
            raise ValueError("Rabi frequency must be non-negative")
        object.__setattr__(self, "V", V)

    @property
    def N(self) -> int:
        return self.V.shape[0]

    @property
    def dim(self) -> int:
        return 1 << self.N

    def truncated(self, max_range: int = 2) -> "SpinSystem":
        """Keep only couplings between sites at most ``max_range`` apart along the chain."""
        i, j = np.indices(self.V.shape)
        V = np.where(np.abs(i - j) <= max_range, self.V, 0.0)
        return SpinSystem(V, self.omega, self.delta)

    def with_drive(self, omega: float, delta: float) -> "SpinSystem":
        return SpinSystem(self.V, omega, delta)


def occupations(N: int) -> np.ndarray:
    """``(2^N, N)`` uint8 table of site occupations for every basis state."""
    idx = np.arange(1 << N, dtype=np.int64)
    shifts = np.arange(N - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts) & 1).astype(np.uint8)


def popcounts(N: int) -> np.ndarray:
    """Number of up spins for every basis index."""
    idx = np.arange(1 << N, dtype=np.int64)
    out = np.zeros(1 << N, dtype=np.int64)
    for b in range(N):
        out += (idx >> b) & 1
    return out


def site_occupation(N: int, site: int) -> np.ndarray:
    idx = np.arange(1 << N, dtype=np.int64)
    return ((idx >> (N - 1 - site)) & 1).astype(float)


def diagonal(sys: SpinSystem) -> np.ndarray:
    """Diagonal of H: interaction energy minus the detuning term."""
    N = sys.N
    idx = np.arange(1 << N, dtype=np.int64)
    occ = [((idx >> (N - 1 - i)) & 1).astype(bool) for i in range(N)]
    E = np.zeros(1 << N)
    for i in range(N):
        for j in range(i):
            if sys.V[i, j] != 0.0:
                E[occ[i] & occ[j]] += sys.V[i, j]
    if sys.delta != 0.0:
        n_up = np.zeros(1 << N)
        for o in occ:
            n_up += o
        E -= 0.5 * sys.delta * (2.0 * n_up - N)
    return E


def build_hamiltonian(sys: SpinSystem, diag: np.ndarray | None = None) -> sp.csr_matrix:
    """Sparse Hermitian matrix of H (real entries)."""
    N = sys.N
    dim = 1 << N
    if diag is None:
        diag = diagonal(sys)
    idx = np.arange(dim, dtype=np.int64)
    rows = [idx]
    cols = [idx]
    vals = [diag]
    if sys.omega != 0.0:
        for b in range(N):
            rows.append(idx)
            cols.append(idx ^ (1 << b))
            vals.append(np.full(dim, 0.5 * sys.omega))
    H = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
    )
    return H.tocsr()


def dense_hamiltonian(sys: SpinSystem, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    if sys.N > cap:
        raise DimensionOverflow(f"dense H requested for N={sys.N} > cap {cap}")
    return build_hamiltonian(sys).toarray()


class MatrixFreeHamiltonian:
    """Applies H without storing off-diagonal entries.

    The drive term is evaluated by reversing each site axis of the state
    reshaped to ``(2,)*N``.
    """

    def __init__(self, sys: SpinSystem):
        self.sys = sys
        self.N = sys.N
        self.dim = sys.dim
        self.diag = diagonal(sys)
        self.half_omega = 0.5 * sys.omega

    def __call__(self, psi: np.ndarray) -> np.ndarray:
        if psi.shape[0] != self.dim:
            raise LengthMismatch(f"state length {psi.shape[0]} != 2^{self.N}")
        out = self.diag * psi
        if self.half_omega:
            t = psi.reshape((2,) * self.N)
            acc = np.zeros_like(t)
            for axis in range(self.N):
                acc += np.flip(t, axis=axis)
            out += self.half_omega * acc.reshape(-1)
        return out

    matvec = __call__


def apply(sys: SpinSystem, state: np.ndarray) -> np.ndarray:
    """H |state> without building the sparse matrix."""
    state = np.asarray(state)
    if state.shape != (sys.dim,):
        raise LengthMismatch(f"state length {state.shape} != 2^{sys.N}")
    return MatrixFreeHamiltonian(sys)(state)


def all_down(N: int) -> np.ndarray:
    psi = np.zeros(1 << N, dtype=complex)
    psi[0] = 1.0
    return psi


def coo_dump(H: sp.spmatrix) -> str:
    """Coordinate-list text, one ``row col re im`` entry per line."""
    C = H.tocoo()
    lines = [
        f"{r} {c} {complex(v).real:.17g} {complex(v).imag:.17g}"
        for r, c, v in zip(C.row, C.col, C.data)
    ]
    return "\n".join(lines) + "\n"
