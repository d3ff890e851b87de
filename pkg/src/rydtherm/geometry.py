"""Zigzag chain geometry and van der Waals pair interactions.

Units: lengths in micrometres, energies as angular frequencies in rad/us
(hbar = 1).  ``C6`` is given as a magnitude in GHz um^6; the repulsive sign
convention is implied.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

#: |C6| of the 67S_{1/2} state, GHz um^6.
C6_67S = 470.0


class InvalidParameter(ValueError):
    """Raised for out-of-range physical parameters."""


class CoincidentAtoms(ValueError):
    """Raised when two atoms sit at the same position."""


def mhz_to_angular(f_mhz: float) -> float:
    """Ordinary frequency in MHz -> angular frequency in rad/us."""
    return TWO_PI * f_mhz


def angular_to_mhz(w: float) -> float:
    return w / TWO_PI


@dataclass(frozen=True)
class ChainGeometry:
    N: int
    d: float
    theta: float
    positions: np.ndarray = field(repr=False)

    def distances(self) -> np.ndarray:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.sqrt(np.sum(diff**2, axis=-1))

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "d_um": self.d,
            "theta_deg": self.theta,
            "positions": self.positions.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ChainGeometry":
        pos = np.asarray(data["positions"], dtype=float).reshape(-1, 2)
        return cls(int(data["N"]), float(data["d_um"]), float(data["theta_deg"]), pos)


@dataclass(frozen=True)
class InteractionMatrix:
    V: np.ndarray
    C6: float

    @property
    def N(self) -> int:
        return self.V.shape[0]


def _check_theta(theta: float) -> None:
    if not (0.0 < theta <= 180.0):
        raise InvalidParameter(f"bending angle must lie in (0, 180], got {theta}")


def build_chain(N: int, d: float, theta: float) -> ChainGeometry:
    """Place ``N`` atoms on a zigzag chain with bond length ``d`` and interior angle ``theta``.

    The first atom sits at the origin and the chain runs along +x; odd sites
    are shifted by ``d cos(theta/2)`` in +y.  ``theta = 180`` gives a straight line.
    """
    if int(N) != N or N < 1:
        raise InvalidParameter(f"atom count must be a positive integer, got {N}")
    if not d > 0:
        raise InvalidParameter(f"spacing must be positive, got {d}")
    _check_theta(theta)
    half = math.radians(theta) / 2.0
    dx = d * math.sin(half)
    dy = 0.0 if theta == 180.0 else d * math.cos(half)
    idx = np.arange(int(N))
    positions = np.column_stack([idx * dx, (idx % 2) * dy])
    return ChainGeometry(int(N), float(d), float(theta), positions)


def jitter(geom: ChainGeometry, sigma: float, rng: np.random.Generator) -> ChainGeometry:
    """Gaussian positional disorder for one shot (thermal motion stand-in)."""
    if sigma < 0:
        raise InvalidParameter("jitter sigma must be non-negative")
    if sigma == 0:
        return geom
    pos = geom.positions + rng.normal(0.0, sigma, size=geom.positions.shape)
    return ChainGeometry(geom.N, geom.d, geom.theta, pos)


def interaction_matrix(
    geom: ChainGeometry, C6: float = C6_67S, v12_mhz: float | None = None
) -> InteractionMatrix:
    """Pair energies ``V_ij = 2 pi |C6| / r_ij^6`` in rad/us.

    With ``v12_mhz`` the whole matrix is rescaled so that the first bond
    carries ``V_12 / 2pi = v12_mhz``; ratios between pairs are untouched.
    """
    C6 = abs(C6)
    if not C6 > 0:
        raise InvalidParameter("C6 magnitude must be positive")
    r = geom.distances()
    off = ~np.eye(geom.N, dtype=bool)
    if np.any(r[off] == 0.0):
        raise CoincidentAtoms("two atoms share a position")
    V = np.zeros_like(r)
    # GHz um^6 -> MHz um^6 -> rad/us
    V[off] = TWO_PI * C6 * 1e3 / r[off] ** 6
    if v12_mhz is not None and geom.N >= 2:
        if not v12_mhz > 0:
            raise InvalidParameter("V12 override must be positive")
        V *= mhz_to_angular(v12_mhz) / V[0, 1]
    return InteractionMatrix(V, C6)


def blockade_radius(C6: float, omega: float) -> float:
    """Distance at which the pair shift equals the drive, in um.

    ``omega`` is the Rabi frequency in rad/us.  Evaluated as
    ``(|C6| [MHz um^6] / omega [rad/us])^(1/6)``, which gives 6.5 um for
    |C6| = 470 GHz um^6 at 1 MHz drive.
    """
    if not omega > 0:
        raise InvalidParameter(f"Rabi frequency must be positive, got {omega}")
    return (abs(C6) * 1e3 / omega) ** (1.0 / 6.0)


def effective_density(theta: float, d: float) -> float:
    """One-dimensional atom density of a zigzag chain, per um.

    Interpolates between ``1/d`` for a straight chain and half the projected
    density for a folded one.
    """
    _check_theta(theta)
    if not d > 0:
        raise InvalidParameter(f"spacing must be positive, got {d}")
    half = math.radians(theta) / 2.0
    n_par = 1.0 / (d * math.sin(half))
    if theta == 180.0:
        return 1.0 / d
    n_perp = 1.0 / (d * math.cos(half))
    return n_par / 2.0 + min(n_par / 2.0, n_perp)
