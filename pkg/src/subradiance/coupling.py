"""Array geometries and dipole-dipole coupling matrices.

Units: lengths in the transition wavelength, rates in the single-atom decay
rate. The wavenumber of the transition is therefore ``k0 = 2*pi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, GeometryError

K0 = 2.0 * np.pi
DEFAULT_DIPOLE = (0.0, 0.0, 1.0)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ArrayGeometry:
    """Emitter positions plus the shared transition dipole orientation.

    Parameters
    ----------
    positions : (N, 3) array
        Atom positions in units of the wavelength.
    lattice_constant : float
        Nominal spacing (only informative for arbitrary point sets).
    dimensionality : int
        1 for chains, 2 for planar lattices.
    dipole : complex 3-vector
        Normalised to unit length on construction.
    shape : tuple of int
        Grid counts per axis for generated lattices, ``()`` otherwise.
    """

    positions: np.ndarray
    lattice_constant: float
    dimensionality: int = 1
    dipole: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_DIPOLE, dtype=complex))
    shape: tuple = ()

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise GeometryError("positions must have shape (N, 3)")
        if pos.shape[0] < 1:
            raise GeometryError("geometry needs at least one atom")
        if self.dimensionality not in (1, 2):
            raise GeometryError("dimensionality must be 1 or 2")
        d = np.asarray(self.dipole, dtype=complex).reshape(3)
        norm = np.linalg.norm(d)
        if norm == 0:
            raise GeometryError("dipole orientation must be non-zero")
        if pos.shape[0] > 1:
            diff = pos[:, None, :] - pos[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            np.fill_diagonal(dist, np.inf)
            if dist.min() <= 0:
                raise GeometryError("coincident emitters")
        object.__setattr__(self, "positions", _freeze(pos))
        object.__setattr__(self, "dipole", _freeze(d / norm))
        object.__setattr__(self, "shape", tuple(int(c) for c in self.shape))

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    def translated(self, shift) -> "ArrayGeometry":
        return ArrayGeometry(self.positions + np.asarray(shift, float), self.lattice_constant,
                             self.dimensionality, self.dipole, self.shape)

    def site_parity(self) -> np.ndarray:
        """Parity (0 even / 1 odd) of each site's integer lattice coordinates."""
        if not self.shape:
            return np.arange(self.n_atoms) % 2
        coords = np.unravel_index(np.arange(self.n_atoms), self.shape[::-1])
        return np.sum(coords, axis=0) % 2

    def metadata(self) -> dict:
        return {
            "n_atoms": self.n_atoms,
            "dimensionality": self.dimensionality,
            "lattice_constant": float(self.lattice_constant),
            "shape": list(self.shape),
            "dipole": [[float(c.real), float(c.imag)] for c in self.dipole],
        }


def build_lattice(dimensionality: int, counts, a: float, dipole=DEFAULT_DIPOLE) -> ArrayGeometry:
    """Regular chain (along x) or square lattice (in the xy-plane).

    Sites of a square lattice are numbered row by row, x fastest.

    >>> build_lattice(1, 3, 0.15).positions[:, 0]
    array([0.  , 0.15, 0.3 ])
    """
    if not np.isfinite(a) or a <= 0:
        raise GeometryError(f"lattice constant must be positive, got {a}")
    counts = tuple(np.atleast_1d(counts).astype(int))
    if dimensionality == 1:
        if len(counts) != 1:
            raise GeometryError("a chain takes a single count")
    elif dimensionality == 2:
        if len(counts) == 1:
            counts = (counts[0], counts[0])
        if len(counts) != 2:
            raise GeometryError("a square lattice takes two counts")
    else:
        raise GeometryError("dimensionality must be 1 or 2")
    if min(counts) < 1:
        raise GeometryError("counts must be >= 1 per axis")
    if dimensionality == 1:
        pos = np.zeros((counts[0], 3))
        pos[:, 0] = a * np.arange(counts[0])
    else:
        nx, ny = counts
        iy, ix = np.divmod(np.arange(nx * ny), nx)
        pos = np.zeros((nx * ny, 3))
        pos[:, 0] = a * ix
        pos[:, 1] = a * iy
    return ArrayGeometry(pos, float(a), dimensionality, np.asarray(dipole, dtype=complex), counts)


def greens_tensor(r: Sequence[float], k: float = K0) -> np.ndarray:
    """Free-space dyadic Green's tensor of a point dipole, without the contact term."""
    r = np.asarray(r, dtype=float)
    dist = np.linalg.norm(r)
    if dist == 0:
        raise DomainError("Green's tensor is singular at r = 0")
    kr = k * dist
    rhat = r / dist
    a = 1 + 1j / kr - 1 / kr**2
    b = -1 - 3j / kr + 3 / kr**2
    return np.exp(1j * kr) / (4 * np.pi * dist) * (a * np.eye(3) + b * np.outer(rhat, rhat))


def _pair_coupling(r, d, k=K0):
    # -(3 pi / k) d^dagger G d, i.e. J - i Gamma / 2 in units of gamma_0
    return -(3 * np.pi / k) * (d.conj() @ greens_tensor(r, k) @ d)


@dataclass(frozen=True)
class CouplingMatrices:
    """Coherent (``J``) and dissipative (``Gamma``) couplings in units of gamma_0."""

    J: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        G = np.asarray(self.Gamma, dtype=float)
        if J.shape != G.shape or J.ndim != 2 or J.shape[0] != J.shape[1]:
            raise GeometryError("J and Gamma must be square matrices of equal size")
        object.__setattr__(self, "J", _freeze(J))
        object.__setattr__(self, "Gamma", _freeze(G))

    @property
    def n_atoms(self) -> int:
        return self.J.shape[0]

    @property
    def complex_coupling(self) -> np.ndarray:
        """``J - i Gamma / 2`` including the diagonal ``-i gamma_0 / 2``."""
        return self.J - 0.5j * self.Gamma

    def without_coherent(self) -> "CouplingMatrices":
        return CouplingMatrices(np.zeros_like(self.J), self.Gamma)

    def check(self, tol: float = 1e-10) -> None:
        """Raise ``GeometryError`` if symmetry or positivity is violated."""
        if not np.allclose(self.J, self.J.T, atol=tol) or not np.allclose(self.Gamma, self.Gamma.T, atol=tol):
            raise GeometryError("coupling matrices are not symmetric")
        if np.linalg.eigvalsh(self.Gamma).min() < -tol:
            raise GeometryError("Gamma is not positive semidefinite")


def coupling_matrices(geometry: ArrayGeometry, k: float = K0) -> CouplingMatrices:
    """Evaluate J and Gamma for every pair of emitters."""
    n = geometry.n_atoms
    d = geometry.dipole
    pos = geometry.positions
    J = np.zeros((n, n))
    G = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            r = pos[i] - pos[j]
            if np.linalg.norm(r) == 0:
                raise GeometryError(f"atoms {i} and {j} coincide")
            c = _pair_coupling(r, d, k)
            J[i, j] = J[j, i] = c.real
            G[i, j] = G[j, i] = -2 * c.imag
    return CouplingMatrices(J, G)
