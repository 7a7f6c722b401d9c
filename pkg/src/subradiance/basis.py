"""Product-basis bookkeeping shared by all state-vector backends.

Basis index ``b = sum_n bit_n * 2**n`` with ``bit_n = 1`` when atom ``n`` is
excited, so atom 0 is the least significant qubit and ``|g>`` precedes ``|e>``.
Undriven dynamics conserve the excitation number, so most work happens on the
blocks of fixed excitation number ("manifolds") exposed here.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError

MAX_DENSE_ATOMS = 12


def check_dense_capacity(n_atoms: int, cap: int = MAX_DENSE_ATOMS) -> None:
    if n_atoms > cap:
        raise CapacityError(f"{n_atoms} atoms exceed the dense state-vector cap of {cap}")


def popcount(indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros_like(indices)
    while np.any(indices):
        out += indices & 1
        indices = indices >> 1
    return out


class ExcitationBasis:
    """Index tables for the excitation-number blocks of ``n_atoms`` two-level atoms."""

    def __init__(self, n_atoms: int):
        check_dense_capacity(n_atoms)
        self.n_atoms = n_atoms
        self.dim = 2**n_atoms
        all_idx = np.arange(self.dim)
        self.excitations = popcount(all_idx)
        self.blocks = [all_idx[self.excitations == p] for p in range(n_atoms + 1)]
        self.position = np.empty(self.dim, dtype=np.int64)
        for idx in self.blocks:
            self.position[idx] = np.arange(idx.size)
        self.bits = (all_idx[:, None] >> np.arange(n_atoms)[None, :]) & 1
        self._lowering = {}

    def block_dim(self, p: int) -> int:
        return self.blocks[p].size

    def block_bits(self, p: int) -> np.ndarray:
        """(D_p, N) 0/1 table of excited atoms for each state of block ``p``."""
        return self.bits[self.blocks[p]]

    def lowering(self, p: int) -> list:
        """Sparse sigma^-_n restricted to block p -> p-1, one matrix per atom."""
        if p not in self._lowering:
            src = self.blocks[p]
            mats = []
            for n in range(self.n_atoms):
                sel = src[(src >> n) & 1 == 1]
                rows = self.position[sel ^ (1 << n)]
                cols = self.position[sel]
                mats.append(sp.csr_matrix((np.ones(sel.size), (rows, cols)),
                                          shape=(self.block_dim(p - 1), self.block_dim(p))))
            self._lowering[p] = mats
        return self._lowering[p]

    def raise_index(self, p: int) -> np.ndarray:
        """(N, D_{p-1}) position in block ``p`` of ``s+_n |i>``; ``D_p`` where it vanishes."""
        src = self.blocks[p - 1]
        out = np.full((self.n_atoms, src.size), self.block_dim(p), dtype=np.int64)
        for n in range(self.n_atoms):
            ok = (src >> n) & 1 == 0
            out[n, ok] = self.position[src[ok] | (1 << n)]
        return out

    def lower_index(self, p: int) -> np.ndarray:
        """(N, D_p) position in block ``p-1`` of ``s-_n |i>``; ``D_{p-1}`` where it vanishes."""
        src = self.blocks[p]
        out = np.full((self.n_atoms, src.size), self.block_dim(p - 1), dtype=np.int64)
        for n in range(self.n_atoms):
            ok = (src >> n) & 1 == 1
            out[n, ok] = self.position[src[ok] ^ (1 << n)]
        return out

    def lowering_stack(self, p: int) -> sp.csr_matrix:
        """All lowering operators of block ``p`` stacked vertically, atom-major."""
        return sp.vstack(self.lowering(p), format="csr")

    def lowering_dense(self, p: int) -> np.ndarray:
        """(N, D_{p-1}, D_p) dense array of the block lowering operators."""
        return np.stack([m.toarray() for m in self.lowering(p)])


@lru_cache(maxsize=16)
def excitation_basis(n_atoms: int) -> ExcitationBasis:
    return ExcitationBasis(n_atoms)


def full_lowering(n_atoms: int) -> list:
    """sigma^-_n on the full 2**N space as sparse matrices."""
    check_dense_capacity(n_atoms)
    dim = 2**n_atoms
    idx = np.arange(dim)
    ops = []
    for n in range(n_atoms):
        sel = idx[(idx >> n) & 1 == 1]
        ops.append(sp.csr_matrix((np.ones(sel.size), (sel ^ (1 << n), sel)), shape=(dim, dim)))
    return ops
