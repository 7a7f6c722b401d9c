"""Initial states in the three representations used by the backends.

* :class:`PureState` -- amplitudes over the ``2**N`` product basis
  (atom 0 least significant, see :mod:`subradiance.basis`).
* :class:`DensityState` -- density matrix, stored densely or as
  excitation-number blocks.
* :class:`CumulantState` -- moments up to third order for states without
  single-atom coherences.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .basis import check_dense_capacity, excitation_basis
from .errors import DomainError, UnsupportedStateError


@dataclass(frozen=True)
class ExcitationSet:
    """Set of initially excited atoms out of ``n_atoms``."""

    indices: frozenset
    n_atoms: int

    def __init__(self, indices, n_atoms: int):
        idx = [int(i) for i in indices]
        if len(set(idx)) != len(idx):
            raise DomainError("excitation indices must be distinct")
        if any(i < 0 or i >= n_atoms for i in idx):
            raise DomainError(f"excitation indices must lie in [0, {n_atoms})")
        object.__setattr__(self, "indices", frozenset(idx))
        object.__setattr__(self, "n_atoms", int(n_atoms))

    @property
    def n_exc(self) -> int:
        return len(self.indices)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_atoms, dtype=bool)
        m[list(self.indices)] = True
        return m

    def basis_index(self) -> int:
        return int(sum(1 << i for i in self.indices))

    def sorted(self) -> list:
        return sorted(self.indices)


class PureState:
    """Normalised state vector over the product basis."""

    def __init__(self, amplitudes, tol: float = 1e-10):
        psi = np.asarray(amplitudes, dtype=complex).reshape(-1)
        n = int(round(np.log2(psi.size)))
        if 2**n != psi.size:
            raise DomainError("state vector length must be a power of two")
        norm = np.linalg.norm(psi)
        if abs(norm - 1) > tol:
            raise DomainError(f"state is not normalised (|psi| = {norm:.3g})")
        self.amplitudes = psi
        self.n_atoms = n

    def __repr__(self):
        return f"PureState(n_atoms={self.n_atoms})"


class DensityState:
    """Density matrix, dense or split into excitation-number blocks.

    ``blocks`` maps ``(p, q)`` to the sub-matrix between the ``p``- and
    ``q``-excitation manifolds; absent blocks are zero. Either form converts
    to the other on demand.
    """

    def __init__(self, matrix=None, *, blocks=None, n_atoms=None, tol: float = 1e-9):
        if (matrix is None) == (blocks is None):
            raise ValueError("give exactly one of matrix or blocks")
        self._matrix = None
        self._blocks = None
        if matrix is not None:
            m = np.asarray(matrix, dtype=complex)
            n = int(round(np.log2(m.shape[0])))
            if m.shape != (2**n, 2**n):
                raise DomainError("density matrix must be 2**N x 2**N")
            self._matrix = m
            self.n_atoms = n
            if tol is not None:
                if not np.allclose(m, m.conj().T, atol=1e-10):
                    raise DomainError("density matrix is not Hermitian")
                if abs(np.trace(m) - 1) > tol:
                    raise DomainError(f"density matrix trace is {np.trace(m).real:.12g}")
        else:
            if n_atoms is None:
                raise ValueError("n_atoms is required with blocks")
            self.n_atoms = int(n_atoms)
            self._blocks = dict(blocks)
        check_dense_capacity(self.n_atoms)

    @classmethod
    def from_blocks(cls, blocks, n_atoms):
        return cls(blocks=blocks, n_atoms=n_atoms)

    @property
    def dim(self) -> int:
        return 2**self.n_atoms

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            basis = excitation_basis(self.n_atoms)
            m = np.zeros((self.dim, self.dim), dtype=complex)
            for (p, q), blk in self._blocks.items():
                m[np.ix_(basis.blocks[p], basis.blocks[q])] = blk
            self._matrix = m
        return self._matrix

    @property
    def is_blocked(self) -> bool:
        return self._blocks is not None

    def block(self, p: int, q: int) -> np.ndarray:
        basis = excitation_basis(self.n_atoms)
        if self._blocks is not None:
            blk = self._blocks.get((p, q))
            if blk is None:
                return np.zeros((basis.block_dim(p), basis.block_dim(q)), dtype=complex)
            return blk
        return self._matrix[np.ix_(basis.blocks[p], basis.blocks[q])]

    def to_blocks(self, diagonal_only: bool = False) -> dict:
        """Non-zero excitation blocks; ``diagonal_only`` keeps only ``p == q``."""
        if self._blocks is not None:
            items = self._blocks.items()
            return {k: v for k, v in items if not diagonal_only or k[0] == k[1]}
        out = {}
        for p in range(self.n_atoms + 1):
            for q in range(self.n_atoms + 1):
                if diagonal_only and p != q:
                    continue
                blk = self.block(p, q)
                if np.any(blk != 0):
                    out[(p, q)] = blk.copy()
        return out

    def trace(self) -> float:
        if self._blocks is not None:
            return float(sum(np.trace(b).real for (p, q), b in self._blocks.items() if p == q))
        return float(np.trace(self._matrix).real)

    def validate(self, herm_tol=1e-10, trace_tol=1e-9, psd_tol=1e-8) -> None:
        """Raise ``DomainError`` unless Hermitian, unit-trace and PSD."""
        m = self.matrix
        if np.abs(m - m.conj().T).max() > herm_tol:
            raise DomainError("density matrix is not Hermitian")
        if abs(np.trace(m) - 1) > trace_tol:
            raise DomainError("density matrix trace differs from one")
        if np.linalg.eigvalsh(0.5 * (m + m.conj().T)).min() < -psd_tol:
            raise DomainError("density matrix is not positive semidefinite")

    def __repr__(self):
        kind = "blocked" if self.is_blocked else "dense"
        return f"DensityState(n_atoms={self.n_atoms}, {kind})"


def _distinct_mask(n: int, order: int) -> np.ndarray:
    if order == 2:
        return ~np.eye(n, dtype=bool)
    i, j, k = np.ogrid[:n, :n, :n]
    return (i != j) & (j != k) & (i != k)


@dataclass
class CumulantState:
    """Moments up to third order of an excitation-number-mixed state.

    ``coh[i, j] = <s+_i s-_j>``, ``pcoh[i, j, k] = <n_i s+_j s-_k>``; entries
    with repeated indices are unused and kept at zero.
    """

    pop: np.ndarray
    coh: np.ndarray
    pp: np.ndarray
    pcoh: np.ndarray
    ppp: np.ndarray

    @property
    def n_atoms(self) -> int:
        return self.pop.size

    @classmethod
    def zeros(cls, n: int) -> "CumulantState":
        return cls(np.zeros(n), np.zeros((n, n), complex), np.zeros((n, n)),
                   np.zeros((n, n, n), complex), np.zeros((n, n, n)))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pop.astype(complex), self.coh.ravel(), self.pp.astype(complex).ravel(),
                               self.pcoh.ravel(), self.ppp.astype(complex).ravel()])

    @classmethod
    def from_vector(cls, y: np.ndarray, n: int) -> "CumulantState":
        s2, s3 = n * n, n**3
        o = np.cumsum([0, n, s2, s2, s3, s3])
        return cls(y[o[0]:o[1]].real.copy(), y[o[1]:o[2]].reshape(n, n).copy(),
                   y[o[2]:o[3]].real.reshape(n, n).copy(), y[o[3]:o[4]].reshape(n, n, n).copy(),
                   y[o[4]:o[5]].real.reshape(n, n, n).copy())

    def symmetry_defect(self) -> float:
        """Largest violation of Hermiticity of ``coh`` and permutation symmetry."""
        err = np.abs(self.coh - self.coh.conj().T).max(initial=0.0)
        err = max(err, np.abs(self.pp - self.pp.T).max(initial=0.0))
        for perm in permutations(range(3)):
            err = max(err, np.abs(self.ppp - self.ppp.transpose(perm)).max(initial=0.0))
        # pcoh[i, j, k]* = pcoh[i, k, j]
        err = max(err, np.abs(self.pcoh - self.pcoh.transpose(0, 2, 1).conj()).max(initial=0.0))
        return float(err)

    def cauchy_schwarz_violation(self) -> float:
        """max(|coh_ij|^2 - pop_i pop_j, 0): monitored, never enforced."""
        excess = np.abs(self.coh) ** 2 - np.outer(self.pop, self.pop)
        np.fill_diagonal(excess, 0.0)
        return float(max(excess.max(initial=0.0), 0.0))


def _product_state(amps) -> np.ndarray:
    psi = np.ones(1, dtype=complex)
    for g, e in amps:
        psi = np.kron(np.array([g, e], dtype=complex), psi)
    return psi


def coherent_spin_state(geometry, n_exc: float, k=None) -> PureState:
    """``prod_n (sqrt(1 - n_exc)|g> + exp(i k.r_n) sqrt(n_exc)|e>)``.

    ``k`` is a wavevector in units of ``1 / lambda_0`` (so the light cone is
    ``|k| < 2 pi``); the default is normal incidence, ``k = 0``.
    """
    if not 0.0 <= n_exc <= 1.0:
        raise DomainError(f"excitation fraction must lie in [0, 1], got {n_exc}")
    pos = geometry.positions
    check_dense_capacity(pos.shape[0])
    phases = np.ones(pos.shape[0], complex) if k is None else np.exp(1j * pos @ np.asarray(k, float))
    g, e = np.sqrt(1.0 - n_exc), np.sqrt(n_exc)
    return PureState(_product_state([(g, e * ph) for ph in phases]))


def incoherent_product_state(excitations: ExcitationSet) -> PureState:
    check_dense_capacity(excitations.n_atoms)
    psi = np.zeros(2**excitations.n_atoms, dtype=complex)
    psi[excitations.basis_index()] = 1.0
    return PureState(psi)


def checkerboard(geometry, parity: int = 0) -> ExcitationSet:
    """Atoms whose lattice coordinates sum to an even (``parity=0``) number."""
    sites = np.flatnonzero(geometry.site_parity() == parity)
    return ExcitationSet(sites, geometry.n_atoms)


def random_excitation_sets(n_atoms: int, n_exc: int, count: int, seed) -> list:
    """``count`` uniformly random subsets of size ``n_exc``, reproducible from ``seed``."""
    if not 0 <= n_exc <= n_atoms:
        raise DomainError(f"cannot excite {n_exc} of {n_atoms} atoms")
    if count < 1:
        raise DomainError("count must be at least 1")
    rng = np.random.default_rng(seed)
    return [ExcitationSet(rng.choice(n_atoms, size=n_exc, replace=False), n_atoms) for _ in range(count)]


def to_density(state: PureState) -> DensityState:
    psi = state.amplitudes
    return DensityState(np.outer(psi, psi.conj()))


def to_cumulant(state) -> CumulantState:
    """Moments of an incoherent product state (populations 0 or 1, no coherences)."""
    if isinstance(state, PureState):
        nz = np.flatnonzero(np.abs(state.amplitudes) > 1e-12)
        if nz.size != 1:
            raise UnsupportedStateError("the cumulant backend only accepts incoherent product states")
        idx = int(nz[0])
        state = ExcitationSet([n for n in range(state.n_atoms) if (idx >> n) & 1], state.n_atoms)
    if not isinstance(state, ExcitationSet):
        raise UnsupportedStateError(f"cannot build cumulant moments from {type(state).__name__}")
    n = state.n_atoms
    p = state.mask().astype(float)
    cs = CumulantState.zeros(n)
    cs.pop = p
    cs.pp = np.einsum("i,j->ij", p, p) * _distinct_mask(n, 2)
    cs.ppp = np.einsum("i,j,k->ijk", p, p, p) * _distinct_mask(n, 3)
    return cs
