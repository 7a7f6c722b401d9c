"""Collective decay of dipole-coupled two-level emitter arrays.

Three solvers share one model description: the full master equation
(:mod:`~subradiance.lindblad`), quantum trajectories (:mod:`~subradiance.mcwf`)
and a third-order cumulant expansion (:mod:`~subradiance.cumulant`).
Lengths are in units of the transition wavelength, rates in units of the
single-atom decay rate.
"""

from .coupling import (ArrayGeometry, CouplingMatrices, build_lattice, coupling_matrices,
                       greens_tensor)
from .cumulant import cumulant_closure, cumulant_rhs, evolve_cumulant
from .errors import (CapacityError, ConfigError, ConsistencyError, DomainError, GeometryError,
                     IntegrationError, SubradianceError, UnsupportedStateError)
from .lindblad import (SystemModel, effective_hamiltonian, evolve_density, liouvillian_apply,
                       probe_series)
from .mcwf import (JumpChannels, TrajectoryConfig, collective_jump_channels, ensemble_average,
                   evolve_trajectory, run_ensemble)
from .observables import (ObservableSeries, burst_ratio, correlation_matrix, fidelity,
                          instantaneous_rate, subradiant_population)
from .spectral import (ManifoldSpectrum, SpectrumResult, dynamic_spectra, dynamic_spectrum,
                       late_time_decay_fit, manifold_eigenstates, manifold_overlaps)
from .states import (CumulantState, DensityState, ExcitationSet, PureState, checkerboard,
                     coherent_spin_state, incoherent_product_state, random_excitation_sets,
                     to_cumulant, to_density)

__version__ = "0.1.0"
