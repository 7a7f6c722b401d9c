"""Populations, emission rates and derived figures of merit.

All functions accept any of the three state representations where that makes
sense. Rates are in units of gamma_0, times in units of 1 / gamma_0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .basis import excitation_basis
from .errors import DomainError
from .states import CumulantState, DensityState, PureState

POPULATION_FLOOR = 1e-8
CSV_COLUMNS = ("t", "p_exc", "gamma_tot", "gamma_inst")


@dataclass
class ObservableSeries:
    """Time series of the total excitation and emission rates.

    ``gamma_inst`` is NaN wherever ``p_exc`` is below :data:`POPULATION_FLOOR`.
    MCWF runs additionally carry standard errors in the ``*_err`` arrays.
    """

    times: np.ndarray
    p_exc: np.ndarray
    gamma_tot: np.ndarray
    gamma_inst: Optional[np.ndarray] = None
    p_exc_err: Optional[np.ndarray] = None
    gamma_tot_err: Optional[np.ndarray] = None
    gamma_inst_err: Optional[np.ndarray] = None
    correlations: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.p_exc = np.asarray(self.p_exc, dtype=float)
        self.gamma_tot = np.asarray(self.gamma_tot, dtype=float)
        if self.gamma_inst is None:
            self.gamma_inst = instantaneous_from_totals(self.p_exc, self.gamma_tot)

    def __len__(self):
        return self.times.size

    @property
    def has_errors(self) -> bool:
        return self.p_exc_err is not None

    def gamma_tot_fd(self) -> np.ndarray:
        """Emission rate from finite differences of ``p_exc`` (cross-check only)."""
        return -np.gradient(self.p_exc, self.times, edge_order=2)

    def to_csv(self, path=None) -> str:
        cols = list(CSV_COLUMNS)
        data = [self.times, self.p_exc, self.gamma_tot, self.gamma_inst]
        if self.has_errors:
            cols += ["p_exc_err", "gamma_tot_err", "gamma_inst_err"]
            data += [self.p_exc_err, self.gamma_tot_err, self.gamma_inst_err]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in zip(*data):
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text) -> "ObservableSeries":
        if "\n" in str(path_or_text):
            text = str(path_or_text)
        else:
            with open(path_or_text) as fh:
                text = fh.read()
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        col = {name: body[:, i] for i, name in enumerate(header)}
        return cls(col["t"], col["p_exc"], col["gamma_tot"], col["gamma_inst"],
                   col.get("p_exc_err"), col.get("gamma_tot_err"), col.get("gamma_inst_err"))


def instantaneous_from_totals(p_exc, gamma_tot, floor=POPULATION_FLOOR) -> np.ndarray:
    p_exc = np.asarray(p_exc, dtype=float)
    out = np.full(p_exc.shape, np.nan)
    ok = p_exc > floor
    out[ok] = np.asarray(gamma_tot, dtype=float)[ok] / p_exc[ok]
    return out


def _pure_correlations(psi: np.ndarray, n: int) -> np.ndarray:
    # <s+_a s-_b> = (s-_a psi)^dagger (s-_b psi)
    idx = np.arange(psi.size)
    low = np.zeros((n, psi.size), dtype=complex)
    for a in range(n):
        sel = idx[(idx >> a) & 1 == 1]
        low[a, sel ^ (1 << a)] = psi[sel]
    return low.conj() @ low.T


def _density_correlations(rho: DensityState) -> np.ndarray:
    n = rho.n_atoms
    basis = excitation_basis(n)
    out = np.zeros((n, n), dtype=complex)
    for p in range(1, n + 1):
        blk = rho.block(p, p)
        if not np.any(blk):
            continue
        lows = basis.lowering(p)
        lr = [low @ blk for low in lows]          # s-_b rho
        for a in range(n):
            la = lows[a]
            for b in range(n):
                # Tr(s+_a s-_b rho) = sum((s-_a)^* * (s-_b rho))
                out[a, b] += la.multiply(lr[b]).sum()
    return out


def correlation_matrix(state) -> np.ndarray:
    """``C[n, m] = <s+_n s-_m>``; the diagonal holds the populations."""
    if isinstance(state, PureState):
        return _pure_correlations(state.amplitudes, state.n_atoms)
    if isinstance(state, DensityState):
        return _density_correlations(state)
    if isinstance(state, CumulantState):
        c = state.coh.copy()
        np.fill_diagonal(c, state.pop)
        return c
    raise TypeError(f"unsupported state type {type(state).__name__}")


def excited_population(state) -> float:
    return float(np.real(np.trace(correlation_matrix(state))))


def emission_rate(state, couplings) -> float:
    """Total photon emission rate ``sum_nm Gamma_nm <s+_n s-_m>``."""
    return float(np.real(np.sum(couplings.Gamma * correlation_matrix(state))))


def instantaneous_rate(state, couplings, floor=POPULATION_FLOOR) -> float:
    """Emission rate per remaining excitation; NaN when nothing is left to decay."""
    corr = correlation_matrix(state)
    p = float(np.real(np.trace(corr)))
    if p <= floor:
        return math.nan
    return float(np.real(np.sum(couplings.Gamma * corr))) / p


@dataclass(frozen=True)
class SubradiantPopulation:
    p_sub: float
    t_sub: float
    multiple_crossings: bool = False


def subradiant_population(series: ObservableSeries, threshold: float = 0.1) -> Optional[SubradiantPopulation]:
    """Population left when ``gamma_inst`` first falls below ``threshold``.

    The crossing is located by linear interpolation between the bracketing
    samples; ``None`` if the rate never drops below the threshold.
    """
    g = series.gamma_inst
    t = series.times
    valid = np.isfinite(g)
    above = valid & (g > threshold)
    below = valid & (g <= threshold)
    crossings = np.flatnonzero(above[:-1] & below[1:])
    if crossings.size == 0:
        if valid.any() and below[np.argmax(valid)]:
            i = int(np.argmax(valid))
            return SubradiantPopulation(float(series.p_exc[i]), float(t[i]), False)
        return None
    i = int(crossings[0])
    frac = (g[i] - threshold) / (g[i] - g[i + 1])
    t_sub = t[i] + frac * (t[i + 1] - t[i])
    p_sub = series.p_exc[i] + frac * (series.p_exc[i + 1] - series.p_exc[i])
    return SubradiantPopulation(float(p_sub), float(t_sub), bool(crossings.size > 1))


def burst_ratio(series: ObservableSeries, gamma_tot0: Optional[float] = None) -> float:
    """``max_t gamma_tot / gamma_tot(0)``; 1 means a monotone decrease."""
    g0 = series.gamma_tot[0] if gamma_tot0 is None else gamma_tot0
    if not g0 > 0:
        raise DomainError("initial emission rate vanishes; burst ratio undefined")
    return float(max(np.max(series.gamma_tot), g0) / g0)


def burst_time(series: ObservableSeries) -> float:
    return float(series.times[int(np.argmax(series.gamma_tot))])


def fidelity(target: PureState, rho, psd_tol: float = 1e-8) -> float:
    """Uhlmann fidelity with a pure target, ``sqrt(<psi|rho|psi>)``."""
    if not isinstance(rho, DensityState):
        rho = DensityState(rho)
    if rho.n_atoms != target.n_atoms:
        raise DomainError("target and density matrix dimensions differ")
    m = rho.matrix
    w = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
    if w.min() < -psd_tol:
        raise DomainError(f"density matrix has eigenvalue {w.min():.3g} < 0")
    psi = target.amplitudes
    overlap = float(np.real(psi.conj() @ m @ psi))
    return math.sqrt(min(max(overlap, 0.0), 1.0))
