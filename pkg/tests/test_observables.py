import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import sqrtm

from subradiance.coupling import build_lattice, coupling_matrices
from subradiance.errors import DomainError
from subradiance.observables import (ObservableSeries, burst_ratio, burst_time, correlation_matrix,
                                     emission_rate, excited_population, fidelity, instantaneous_rate,
                                     subradiant_population)
from subradiance.states import (DensityState, ExcitationSet, coherent_spin_state, incoherent_product_state,
                                to_cumulant, to_density)

from .conftest import random_density


def _series(t, p, g):
    return ObservableSeries(np.asarray(t, float), np.asarray(p, float), np.asarray(g, float))


def test_gamma_inst_nan_below_floor():
    s = _series([0, 1, 2], [1.0, 0.5, 1e-12], [1.0, 0.2, 1e-13])
    assert s.gamma_inst[0] == 1.0 and s.gamma_inst[1] == pytest.approx(0.4)
    assert math.isnan(s.gamma_inst[2])


def test_subradiant_population_interpolates():
    # gamma_inst = 0.3, 0.2, 0.05 -> crosses 0.1 two thirds of the way into [1, 2]
    s = _series([0, 1, 2], [1.0, 0.5, 0.2], [0.3, 0.1, 0.01])
    r = subradiant_population(s, 0.1)
    assert r.t_sub == pytest.approx(1 + 2 / 3)
    assert r.p_sub == pytest.approx(0.5 - 0.3 * 2 / 3)
    assert not r.multiple_crossings


def test_subradiant_population_absent_and_immediate():
    assert subradiant_population(_series([0, 1], [1, 0.5], [1, 0.5])) is None
    r = subradiant_population(_series([0, 1], [1, 0.9], [0.05, 0.04]))
    assert r.t_sub == 0 and r.p_sub == 1


def test_multiple_crossings_flagged():
    s = _series([0, 1, 2, 3, 4], [1, 1, 1, 1, 1], [0.2, 0.05, 0.2, 0.05, 0.01])
    r = subradiant_population(s, 0.1)
    assert r.multiple_crossings and r.t_sub < 1


def test_burst_ratio():
    s = _series([0, 1, 2], [1, 0.9, 0.5], [1.0, 1.2, 0.4])
    assert burst_ratio(s) == pytest.approx(1.2)
    assert burst_time(s) == 1
    assert burst_ratio(_series([0, 1], [1, 0.5], [1, 0.5])) == 1.0
    with pytest.raises(DomainError):
        burst_ratio(_series([0, 1], [0, 0], [0, 0]))


def test_csv_round_trip():
    s = _series([0, 0.5], [1.0, 0.6], [1.0, 0.55])
    back = ObservableSeries.from_csv(s.to_csv())
    assert np.array_equal(back.p_exc, s.p_exc) and np.array_equal(back.gamma_tot, s.gamma_tot)
    s.p_exc_err = s.gamma_tot_err = s.gamma_inst_err = np.array([0.1, 0.2])
    back = ObservableSeries.from_csv(s.to_csv())
    assert np.array_equal(back.p_exc_err, [0.1, 0.2])


def test_correlations_agree_across_representations():
    s = ExcitationSet([1, 3], 4)
    psi = incoherent_product_state(s)
    a, b, c = correlation_matrix(psi), correlation_matrix(to_density(psi)), correlation_matrix(to_cumulant(s))
    assert np.allclose(a, b) and np.allclose(a, c)
    coh = coherent_spin_state(build_lattice(1, 3, 0.2), 0.4)
    assert np.allclose(correlation_matrix(coh), correlation_matrix(to_density(coh)))


def test_emission_rate_of_superposition():
    cm = coupling_matrices(build_lattice(1, 2, 0.1))
    plus = np.zeros(4, complex)
    plus[[1, 2]] = 1 / np.sqrt(2)
    rho = DensityState(np.outer(plus, plus))
    assert emission_rate(rho, cm) == pytest.approx(1 + cm.Gamma[0, 1])
    assert instantaneous_rate(rho, cm) == pytest.approx(1 + cm.Gamma[0, 1])
    assert excited_population(rho) == pytest.approx(1.0)
    assert math.isnan(instantaneous_rate(incoherent_product_state(ExcitationSet([], 2)), cm))


def _uhlmann(sigma, rho):
    s = sqrtm(sigma)
    return float(np.real(np.trace(sqrtm(s @ rho @ s))))


@given(st.integers(1, 3), st.integers(0, 10**6))
def test_fidelity_matches_uhlmann_formula(n, seed):
    rho = random_density(n, seed)
    rng = np.random.default_rng(seed + 1)
    v = rng.normal(size=2**n) + 1j * rng.normal(size=2**n)
    v /= np.linalg.norm(v)
    from subradiance.states import PureState
    target = PureState(v)
    assert fidelity(target, rho) == pytest.approx(_uhlmann(np.outer(v, v.conj()), rho), abs=1e-6)


def test_fidelity_bounds_and_errors():
    psi = incoherent_product_state(ExcitationSet([0], 2))
    assert fidelity(psi, to_density(psi)) == pytest.approx(1.0)
    assert fidelity(psi, np.eye(4) / 4) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        fidelity(psi, np.eye(2) / 2)
    with pytest.raises(DomainError):
        fidelity(psi, DensityState(np.diag([1.5, -0.5, 0, 0]), tol=None))
