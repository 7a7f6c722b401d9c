"""Manifold eigenstructure, overlaps, late-time rate fits and emission spectra.

Two decompositions are kept side by side for every excitation manifold:

* the Hermitian part of the block Hamiltonian (coherent couplings plus
  detunings), whose orthonormal eigenstates are used for overlaps, and
* the non-Hermitian ``H_eff`` block, whose complex eigenvalues give the
  decay rates ``-2 Im(lambda)`` of the collective modes.
"""

from __future__ import annotations

import csv
import io
import time as _time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _ode
from .basis import check_dense_capacity, excitation_basis
from .errors import DomainError
from .lindblad import DEFAULT_ATOL, DEFAULT_RTOL, SystemModel, _BlockSystem, evolve_density
from .states import DensityState

DEFAULT_TAU_MAX = 200.0
DEFAULT_DTAU = 0.05
BLOCK_FLOOR = 1e-12
CUTOFF_RESIDUAL = 1e-4


@dataclass
class Manifold:
    n_exc: int
    energies: np.ndarray            # Hermitian block eigenvalues
    states: np.ndarray              # columns, orthonormal
    decay_rates: np.ndarray         # <psi| sum Gamma s+ s- |psi>
    modes: np.ndarray               # complex eigenvalues of the H_eff block
    mode_vectors: np.ndarray        # unit-norm right eigenvectors (columns)

    @property
    def mode_rates(self) -> np.ndarray:
        return -2.0 * self.modes.imag

    @property
    def darkest_rate(self) -> float:
        return float(self.mode_rates[0])


@dataclass
class ManifoldSpectrum:
    n_atoms: int
    manifolds: list
    model_metadata: dict = field(default_factory=dict)

    def __getitem__(self, p) -> Manifold:
        return self.manifolds[p]

    def __len__(self):
        return len(self.manifolds)


def _lexi_key(v):
    return tuple(np.round(np.concatenate([v.real, v.imag]), 12))


def manifold_eigenstates(model: SystemModel) -> ManifoldSpectrum:
    """Per-manifold decompositions, each sorted by increasing decay rate."""
    if model.is_driven:
        raise DomainError("manifold decomposition needs an undriven model")
    n = model.n_atoms
    check_dense_capacity(n)
    ops = model.blocks
    manifolds = []
    for p in range(n + 1):
        H = ops.H[p]
        herm = 0.5 * (H + H.conj().T)
        e, V = np.linalg.eigh(herm)
        D = ops.D[p]
        rates = np.real(np.einsum("ij,ik,kj->j", V.conj(), D, V))
        order = np.lexsort((e, rates))
        lam, R = np.linalg.eig(H)
        R = R / np.linalg.norm(R, axis=0)
        # fix the phase so the largest component is real positive
        piv = np.argmax(np.abs(R), axis=0)
        R = R * (np.abs(R[piv, range(R.shape[1])]) / R[piv, range(R.shape[1])])
        mrate = -2.0 * lam.imag
        morder = sorted(range(lam.size), key=lambda i: (round(mrate[i], 12), _lexi_key(R[:, i])))
        manifolds.append(Manifold(p, e[order], V[:, order], rates[order], lam[morder], R[:, morder]))
    return ManifoldSpectrum(n, manifolds, model.metadata())


@dataclass
class ManifoldOverlaps:
    totals: np.ndarray              # O_p for p = 0..N
    per_state: list                 # per manifold, overlaps ordered like the spectrum

    def table(self, spectrum: ManifoldSpectrum) -> list:
        rows = []
        for p, ov in enumerate(self.per_state):
            m = spectrum[p]
            for i, o in enumerate(ov):
                rows.append((p, i, float(m.energies[i]), float(m.decay_rates[i]), float(o)))
        return rows


def manifold_overlaps(rho, spectrum: ManifoldSpectrum) -> ManifoldOverlaps:
    """``<psi_i|rho|psi_i>`` for all Hermitian-block eigenstates."""
    if not isinstance(rho, DensityState):
        rho = DensityState(rho, tol=None)
    if rho.n_atoms != spectrum.n_atoms:
        raise DomainError("density matrix and spectrum belong to different atom numbers")
    per = []
    for p, m in enumerate(spectrum.manifolds):
        blk = rho.block(p, p)
        per.append(np.real(np.einsum("ij,ik,kj->j", m.states.conj(), blk, m.states)))
    return ManifoldOverlaps(np.array([o.sum() for o in per]), per)


def overlap_series(model: SystemModel, rho0, times, spectrum: Optional[ManifoldSpectrum] = None, **kw):
    """Evolve ``rho0`` and return ``(evolution, totals[T, N+1], per_state list)``."""
    spectrum = spectrum or manifold_eigenstates(model)
    ev = evolve_density(model, rho0, times, observers={"overlaps": lambda t, r: manifold_overlaps(r, spectrum)},
                        **kw)
    ovs = ev.observed["overlaps"]
    totals = np.array([o.totals for o in ovs])
    return ev, totals, [o.per_state for o in ovs]


@dataclass(frozen=True)
class DecayFit:
    rate: float
    intercept: float
    residual: float                 # rms deviation of log values from the line
    window: tuple


def late_time_decay_fit(times, values, window) -> DecayFit:
    """Least-squares slope of ``log(values)`` over ``window = (t_start, t_end)``."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    sel = (t >= window[0]) & (t <= window[1])
    if sel.sum() < 2:
        raise DomainError("fit window holds fewer than two samples")
    if np.any(v[sel] <= 0):
        raise DomainError("fit window contains non-positive values")
    coef = np.polyfit(t[sel], np.log(v[sel]), 1)
    resid = np.log(v[sel]) - np.polyval(coef, t[sel])
    return DecayFit(float(-coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid**2))), tuple(window))


@dataclass
class SpectrumResult:
    omega: np.ndarray
    total: np.ndarray
    per_atom: Optional[np.ndarray]
    t_prime: float
    tau_max: float
    residual: float                 # max_n |C_n(tau_max)| / |C_n(0)|
    metadata: dict = field(default_factory=dict)

    def peak_frequencies(self, min_height: float = 0.0) -> np.ndarray:
        """Grid frequencies of local maxima of ``total``."""
        s = self.total
        idx = np.flatnonzero((s[1:-1] > s[:-2]) & (s[1:-1] >= s[2:]) & (s[1:-1] > min_height)) + 1
        return self.omega[idx]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# t_prime", repr(self.t_prime), "tau_max", repr(self.tau_max), "residual", repr(self.residual)])
        cols = ["omega", "S_total"]
        if self.per_atom is not None:
            cols += [f"S_{n}" for n in range(self.per_atom.shape[0])]
        w.writerow(cols)
        for i, om in enumerate(self.omega):
            row = [om, self.total[i]]
            if self.per_atom is not None:
                row += list(self.per_atom[:, i])
            w.writerow([repr(float(x)) for x in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def regression_correlations(model: SystemModel, rhos, taus, *, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                            method="RK45", atoms=None, block_floor=BLOCK_FLOOR) -> np.ndarray:
    """``C[s, n, k] = <s+_n(t'_s + tau_k) s-_n(t'_s)>`` for each state in ``rhos``.

    Uses the regression theorem in its adjoint form,
    ``Tr[s+_n e^{L tau}(s-_n rho)] = Tr[(e^{L^dag tau} s+_n) s-_n rho]``,
    so one backward propagation per atom serves every start state.

    Manifolds whose population ``Tr rho_pp`` is at most ``block_floor`` are
    dropped; each dropped block changes ``|C|`` by at most its population.
    """
    if model.is_driven:
        raise DomainError("spectra are only defined here for undriven dynamics")
    n = model.n_atoms
    atoms = list(range(n)) if atoms is None else list(atoms)
    rhos = [r if isinstance(r, DensityState) else DensityState(r, tol=None) for r in rhos]
    basis = excitation_basis(n)
    ops = model.blocks
    top = 0
    for r in rhos:
        for p in range(n, 0, -1):
            if np.trace(r.block(p, p)).real > block_floor:
                top = max(top, p)
                break
    taus = _ode.check_time_grid(taus)
    out = np.zeros((len(rhos), len(atoms), taus.size), dtype=complex)
    if top == 0:
        return out
    system = _BlockSystem(ops, [(1, 0)], adjoint=True, top=top)
    # s-_n rho restricted to (p-1, p), one per start state and atom
    sources = []
    for r in rhos:
        per_atom = []
        for a in atoms:
            blocks = {}
            for p in range(1, top + 1):
                rp = r.block(p, p)
                if np.trace(rp).real > block_floor:
                    blocks[(p, p - 1)] = basis.lowering(p)[a] @ rp      # (D_{p-1}, D_p)
            per_atom.append(blocks)
        sources.append(per_atom)
    size = system.size
    y0 = []
    for a in atoms:
        blocks = {(p, p - 1): basis.lowering(p)[a].T.toarray().astype(complex) for p in range(1, top + 1)}
        y0.append(system.pack(blocks))
    y0 = np.concatenate(y0)
    na = len(atoms)

    def fun(t, y):
        return np.concatenate([system.rhs(t, y[i * size:(i + 1) * size]) for i in range(na)])

    def callback(k, t, y):
        for i in range(na):
            part = y[i * size:(i + 1) * size]
            for s in range(len(rhos)):
                acc = 0.0
                for key, X in sources[s][i].items():
                    A = system.view(part, key)               # (D_p, D_{p-1})
                    acc += np.sum(A.T * X)                   # Tr(A X)
                out[s, i, k] = acc

    _ode.integrate(fun, y0, taus, callback, rtol=rtol, atol=atol, method=method)
    return out


def _spectrum_from_correlations(corr, taus, omega):
    # 2 Re int_0^tau_max exp(-i w tau) C(tau) dtau, trapezoidal rule
    w = np.empty_like(taus)
    dt = np.diff(taus)
    w[0], w[-1] = dt[0] / 2, dt[-1] / 2
    w[1:-1] = (dt[:-1] + dt[1:]) / 2
    phase = np.exp(-1j * np.outer(taus, omega))
    return 2.0 * np.real((corr * w) @ phase)


def dynamic_spectra(model: SystemModel, states: dict, omega, *, tau_max=DEFAULT_TAU_MAX, dtau=DEFAULT_DTAU,
                    per_atom: bool = False, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, method="RK45",
                    block_floor=BLOCK_FLOOR, damping: float = 0.0) -> dict:
    """Spectra for several start times sharing one regression propagation.

    ``states`` maps ``t'`` to the density matrix at that time. ``damping``
    multiplies the correlations by ``exp(-damping * tau)`` before the
    transform: every line gains a Lorentzian width ``2 * damping`` and the
    truncation ripple at ``tau_max`` is suppressed.
    """
    if damping < 0:
        raise DomainError("damping must be non-negative")
    omega = np.asarray(omega, dtype=float)
    taus = np.linspace(0.0, tau_max, int(round(tau_max / dtau)) + 1)
    tps = list(states)
    started = _time.perf_counter()
    corr = regression_correlations(model, [states[t] for t in tps], taus, rtol=rtol, atol=atol, method=method,
                                   block_floor=block_floor)
    elapsed = _time.perf_counter() - started
    results = {}
    window = np.exp(-damping * taus)
    for s, tp in enumerate(tps):
        c = corr[s] * window
        c0 = np.abs(c[:, 0])
        live = c0 > 1e-14
        residual = float(np.max(np.abs(c[live, -1]) / c0[live])) if live.any() else 0.0
        if residual > CUTOFF_RESIDUAL:
            warnings.warn(f"correlation at tau_max = {tau_max} still {residual:.2e} of its initial value; "
                          "spectrum lines are cutoff-broadened", RuntimeWarning)
        S_n = _spectrum_from_correlations(c, taus, omega)
        total = S_n.sum(axis=0)
        neg = float(min(total.min(), 0.0))
        meta = {"backend": "master", "method": method, "rtol": rtol, "atol": atol, "dtau": dtau,
                "damping": damping, "block_floor": block_floor, "most_negative": neg, "wall_time": elapsed,
                **model.metadata()}
        results[tp] = SpectrumResult(omega, total, S_n if per_atom else None, float(tp), float(tau_max),
                                     residual, meta)
    return results


def dynamic_spectrum(model: SystemModel, rho, omega, tau_max=DEFAULT_TAU_MAX, per_atom: bool = False,
                     t_prime: float = 0.0, **kw) -> SpectrumResult:
    """``S(w, t') = sum_n 2 Re int_0^tau_max exp(-i w tau) <s+_n(t'+tau) s-_n(t')> dtau``.

    ``omega`` is measured from the bare transition frequency in units of gamma_0.
    """
    return dynamic_spectra(model, {t_prime: rho}, omega, tau_max=tau_max, per_atom=per_atom, **kw)[t_prime]
