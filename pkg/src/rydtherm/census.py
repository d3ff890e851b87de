"""Blockade-allowed spin configurations of the prequench Hamiltonian.

A configuration is an independent set of the blockade graph.  Bitstrings
use site 1 as the most significant bit, so ``int(config, 2)`` is also the
basis index used by :mod:`rydtherm.hamiltonian`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import comb

import numpy as np

from .geometry import ChainGeometry

DEFAULT_SIZE_CAP = 25


class SizeCapExceeded(ValueError):
    pass


class UnsupportedGraph(ValueError):
    pass


@dataclass(frozen=True)
class BlockadeGraph:
    N: int
    edges: frozenset[tuple[int, int]]

    def neighbours(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.N)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def bandwidth(self) -> int:
        return max((j - i for i, j in self.edges), default=0)


@dataclass(frozen=True)
class BlockadeCensus:
    N: int
    configs: list[str]
    nu: list[int]

    @property
    def D(self) -> int:
        return sum(self.nu)

    @property
    def n_max(self) -> int:
        return len(self.nu) - 1

    def indices(self) -> np.ndarray:
        """Basis indices of the configurations, in listing order."""
        return np.array([int(c, 2) for c in self.configs], dtype=np.int64)

    def to_dict(self, theta: float | None = None, with_configs: bool = False) -> dict:
        out = {"N": self.N, "theta_deg": theta, "nu": list(self.nu), "D": self.D}
        if with_configs:
            out["configs"] = list(self.configs)
        return out

    def to_json(self, theta: float | None = None, with_configs: bool = False) -> str:
        return json.dumps(self.to_dict(theta, with_configs))


def blockade_graph(geom: ChainGeometry, r_b: float) -> BlockadeGraph:
    """Edge (i, j) whenever the pair distance is strictly below ``r_b``."""
    r = geom.distances()
    ii, jj = np.nonzero(np.triu(r < r_b, k=1))
    return BlockadeGraph(geom.N, frozenset(zip(ii.tolist(), jj.tolist())))


def enumerate_census(graph: BlockadeGraph, size_cap: int = DEFAULT_SIZE_CAP) -> BlockadeCensus:
    """Exhaustively list independent sets, lexicographically ordered."""
    N = graph.N
    if N > size_cap:
        raise SizeCapExceeded(f"N={N} exceeds enumeration cap {size_cap}")
    # bit masks of lower-indexed neighbours, in MSB-first bit positions
    earlier = [0] * N
    for i, j in graph.edges:
        earlier[j] |= 1 << (N - 1 - i)

    # depth-first over sites 0..N-1, choosing 0 before 1 gives lexicographic order
    found: list[int] = []
    stack = [(0, 0)]
    while stack:
        site, mask = stack.pop()
        if site == N:
            found.append(mask)
            continue
        if not (mask & earlier[site]):
            stack.append((site + 1, mask | (1 << (N - 1 - site))))
        stack.append((site + 1, mask))

    configs = [format(m, f"0{N}b") if N else "" for m in found]
    counts = np.bincount([c.count("1") for c in configs])
    return BlockadeCensus(N, configs, counts.astype(int).tolist())


def count_only(graph: BlockadeGraph, max_band: int = 4) -> tuple[list[int], int]:
    """Count independent sets by up-spin number with a transfer matrix.

    Only banded graphs are supported (every edge joins sites at most
    ``max_band`` apart); the state carried along the chain is the occupation
    of the last ``bandwidth`` sites.
    """
    N = graph.N
    k = graph.bandwidth()
    if k > max_band:
        raise UnsupportedGraph(f"graph bandwidth {k} exceeds transfer-matrix limit {max_band}")
    k = max(k, 1)
    adj = graph.neighbours()
    # weights[state] is a polynomial in x (list of Python ints, exact)
    weights: dict[int, list[int]] = {0: [1]}
    for site in range(N):
        new: dict[int, list[int]] = {}
        for state, poly in weights.items():
            # bit b of state = occupation of site (site - 1 - b)
            for occ in (0, 1):
                if occ:
                    if any(
                        (state >> (site - 1 - j)) & 1
                        for j in adj[site]
                        if site - k <= j < site
                    ):
                        continue
                    shifted = [0] + poly
                else:
                    shifted = poly
                nxt = ((state << 1) | occ) & ((1 << k) - 1)
                acc = new.setdefault(nxt, [])
                if len(acc) < len(shifted):
                    acc.extend([0] * (len(shifted) - len(acc)))
                for n, c in enumerate(shifted):
                    acc[n] += c
        weights = new
    total: list[int] = []
    for poly in weights.values():
        if len(total) < len(poly):
            total.extend([0] * (len(poly) - len(total)))
        for n, c in enumerate(poly):
            total[n] += c
    while len(total) > 1 and total[-1] == 0:
        total.pop()
    return total, sum(total)


def linear_nu(N: int) -> list[int]:
    """Closed form for the straight chain: C(N+1-n, n)."""
    return [comb(N + 1 - n, n) for n in range((N + 1) // 2 + 1) if comb(N + 1 - n, n) > 0]


def zigzag60_nu(N: int) -> list[int]:
    """Closed form for the 60-degree zigzag chain: C(N+2-2n, n)."""
    out = []
    n = 0
    while N + 2 - 2 * n >= n:
        c = comb(N + 2 - 2 * n, n)
        if c == 0:
            break
        out.append(c)
        n += 1
    return out
