import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from subradiance.basis import excitation_basis, popcount
from subradiance.coupling import build_lattice
from subradiance.errors import CapacityError, DomainError, UnsupportedStateError
from subradiance.observables import correlation_matrix
from subradiance.states import (CumulantState, DensityState, ExcitationSet, PureState, checkerboard,
                                coherent_spin_state, incoherent_product_state, random_excitation_sets,
                                to_cumulant, to_density)


def test_basis_index_convention():
    s = ExcitationSet([0, 2], 3)
    psi = incoherent_product_state(s).amplitudes
    assert np.flatnonzero(psi).tolist() == [0b101]


def test_excitation_set_validation():
    with pytest.raises(DomainError):
        ExcitationSet([0, 0], 3)
    with pytest.raises(DomainError):
        ExcitationSet([3], 3)


def test_pure_state_normalisation():
    with pytest.raises(DomainError):
        PureState([1, 1])
    with pytest.raises(DomainError):
        PureState([1, 0, 0])


def test_dense_capacity():
    with pytest.raises(CapacityError):
        incoherent_product_state(ExcitationSet([0], 13))


def test_checkerboard_chain_and_square():
    assert checkerboard(build_lattice(1, 6, 0.1)).sorted() == [0, 2, 4]
    assert checkerboard(build_lattice(1, 6, 0.1), parity=1).sorted() == [1, 3, 5]
    assert checkerboard(build_lattice(2, (3, 3), 0.1)).sorted() == [0, 2, 4, 6, 8]


def test_random_sets_reproducible():
    a = random_excitation_sets(10, 5, 20, seed=3)
    b = random_excitation_sets(10, 5, 20, seed=3)
    assert a == b and all(s.n_exc == 5 for s in a)
    assert a != random_excitation_sets(10, 5, 20, seed=4)
    with pytest.raises(DomainError):
        random_excitation_sets(4, 5, 1, 0)


def test_coherent_state_populations_and_phases():
    geo = build_lattice(1, 4, 0.25)
    k = np.array([np.pi, 0, 0])
    psi = coherent_spin_state(geo, 0.3, k)
    corr = correlation_matrix(psi)
    assert np.allclose(np.diag(corr).real, 0.3)
    # product state: <s+_0 s-_1> = <s+_0><s-_1> = n (1 - n) exp(i k.(r_1 - r_0))
    assert corr[0, 1] == pytest.approx(0.3 * 0.7 * np.exp(1j * np.pi * 0.25))
    with pytest.raises(DomainError):
        coherent_spin_state(geo, 1.2)


def test_fully_inverted_coherent_state_is_product():
    geo = build_lattice(1, 3, 0.2)
    psi = coherent_spin_state(geo, 1.0).amplitudes
    assert abs(psi[-1]) == pytest.approx(1.0)


def test_density_blocks_round_trip():
    geo = build_lattice(1, 4, 0.2)
    rho = to_density(coherent_spin_state(geo, 0.4))
    blocks = rho.to_blocks()
    back = DensityState.from_blocks(blocks, 4)
    assert np.allclose(back.matrix, rho.matrix)
    assert back.trace() == pytest.approx(1.0)
    diag = DensityState.from_blocks(rho.to_blocks(diagonal_only=True), 4)
    assert all(p == q for p, q in diag.to_blocks())


def test_density_validation():
    with pytest.raises(DomainError):
        DensityState(np.diag([0.5, 0.6]))
    with pytest.raises(DomainError):
        DensityState(np.array([[0.5, 1], [0, 0.5]]))
    bad = DensityState(np.diag([1.5, -0.5]))
    with pytest.raises(DomainError):
        bad.validate()


def test_cumulant_state_from_product():
    cs = to_cumulant(ExcitationSet([0, 2], 4))
    assert cs.pop.tolist() == [1, 0, 1, 0]
    assert cs.pp[0, 2] == 1 and cs.pp[0, 1] == 0 and cs.pp[0, 0] == 0
    assert np.all(cs.coh == 0) and cs.symmetry_defect() == 0
    y = cs.to_vector()
    assert np.allclose(CumulantState.from_vector(y, 4).to_vector(), y)


def test_cumulant_rejects_coherent_input():
    with pytest.raises(UnsupportedStateError):
        to_cumulant(coherent_spin_state(build_lattice(1, 2, 0.2), 0.5))
    with pytest.raises(UnsupportedStateError):
        to_cumulant(np.zeros(4))


@given(st.integers(1, 8), st.data())
def test_incoherent_state_moments(n, data):
    idx = data.draw(st.sets(st.integers(0, n - 1)))
    s = ExcitationSet(idx, n)
    corr = correlation_matrix(incoherent_product_state(s))
    assert np.allclose(corr, np.diag(s.mask().astype(float)))
    assert popcount(np.array([s.basis_index()]))[0] == len(idx)


@given(st.integers(1, 8))
def test_basis_blocks_partition(n):
    b = excitation_basis(n)
    allidx = np.sort(np.concatenate(b.blocks))
    assert np.array_equal(allidx, np.arange(2**n))
    assert [b.block_dim(p) for p in range(n + 1)] == [len(x) for x in b.blocks]
