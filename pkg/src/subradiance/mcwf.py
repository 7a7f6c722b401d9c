"""Monte Carlo wave-function unravelling with collective decay channels.

Between jumps the state evolves under the non-Hermitian ``H_eff``; a jump
happens when the squared norm falls below a uniform random threshold, with
the crossing time refined by root bracketing. Channels come from the
eigendecomposition ``Gamma = sum_k lambda_k v_k v_k^T`` and act as
``C_k = sum_n v_kn s-_n`` with rate ``lambda_k``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from . import _ode
from .basis import excitation_basis, full_lowering
from .errors import DomainError, IntegrationError
from .lindblad import SystemModel, effective_hamiltonian
from .observables import ObservableSeries
from .states import ExcitationSet, PureState, incoherent_product_state

DROP_RATE = 1e-12
NORM_GROWTH_TOL = 1e-8
DEFAULT_TRAJECTORIES = 2000


@dataclass(frozen=True)
class JumpChannels:
    rates: np.ndarray          # lambda_k, descending
    vectors: np.ndarray        # (K, N); row k is v_k

    @property
    def n_channels(self) -> int:
        return self.rates.size

    def reconstruct(self) -> np.ndarray:
        return (self.vectors.T * self.rates) @ self.vectors


def collective_jump_channels(couplings, psd_tol: float = 1e-10) -> JumpChannels:
    G = np.asarray(couplings.Gamma, dtype=float)
    if not np.allclose(G, G.T, atol=1e-12):
        raise DomainError("Gamma must be symmetric")
    w, v = np.linalg.eigh(G)
    if w.min() < -psd_tol:
        raise DomainError(f"Gamma has eigenvalue {w.min():.3g} < 0")
    keep = w >= DROP_RATE
    order = np.argsort(w[keep])[::-1]
    return JumpChannels(w[keep][order], v[:, keep][:, order].T.copy())


@dataclass(frozen=True)
class TrajectoryConfig:
    """Ensemble settings.

    ``renormalize`` only affects stored states (``store_states=True``); the
    jump clock always runs on the unnormalised no-jump norm, whose decay
    since the last jump is what the stored raw vectors show.
    """

    trajectories: int = DEFAULT_TRAJECTORIES
    seed: int = 0
    bisection_tol: float = 1e-10
    renormalize: bool = True
    record_jumps: bool = False

    def __post_init__(self):
        if self.trajectories < 1:
            raise DomainError("trajectory count must be at least 1")
        if self.bisection_tol <= 0:
            raise DomainError("bisection tolerance must be positive")

    def rng(self, index: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=self.seed,
                                                                         spawn_key=(int(index),))))


class _Propagator:
    """``exp(-i H_eff t)`` on each invariant block via cached eigendecompositions."""

    def __init__(self, model: SystemModel):
        n = model.n_atoms
        self.n = n
        self.dim = 2**n
        if model.is_driven:
            self.blocks = [np.arange(self.dim)]
            self.H = [effective_hamiltonian(model)]
        else:
            basis = excitation_basis(n)
            self.blocks = list(basis.blocks)
            self.H = model.blocks.H
        self._eig = {}
        idx = np.arange(self.dim)
        self.counts = np.array([bin(b).count("1") for b in idx], dtype=float)
        # sum_nm Gamma_nm s+_n s-_m, the emission-rate operator
        lows = full_lowering(n)
        G = model.Gamma
        emission = sum(lows[a].T @ sum(G[a, b] * lows[b] for b in range(n)) for a in range(n)).tocsr()
        # dense products are faster than sparse ones for a few atoms
        self.emission = emission.toarray() if n <= 8 else emission

    def _decomp(self, b):
        if b not in self._eig:
            H = self.H[b]
            w, V = np.linalg.eig(H)
            if np.linalg.cond(V) > 1e8:
                self._eig[b] = ("expm", H)
            else:
                self._eig[b] = ("eig", w, V, np.linalg.inv(V), V.conj().T @ V)
        return self._eig[b]

    def norm2(self, coeffs, t) -> float:
        """Squared norm of the no-jump state at elapsed time ``t``."""
        return self.norm2_function(coeffs)(t)

    def norm2_function(self, coeffs):
        """``t -> norm2(coeffs, t)`` with the block lookups done once."""
        eig, dense = [], []
        for b, c in enumerate(coeffs):
            if c is None:
                continue
            d = self._decomp(b)
            if d[0] == "eig":
                eig.append((-1j * d[1], d[4], c))
            else:
                dense.append((-1j * d[1], c))
        if len(eig) == 1 and not dense:
            iw, gram, c = eig[0]
            if c.size == 1:
                g = float(np.real(gram[0, 0]) * abs(c[0]) ** 2)
                return lambda t: g * math.exp(2 * np.real(iw[0]) * t)

            def single(t):
                z = np.exp(iw * t) * c
                return float(np.real(np.vdot(z, gram @ z)))
            return single

        def f(t):
            total = 0.0
            for iw, gram, c in eig:
                z = np.exp(iw * t) * c
                total += np.real(np.vdot(z, gram @ z))
            for ih, c in dense:
                v = expm(ih * t) @ c
                total += np.real(np.vdot(v, v))
            return float(total)
        return f

    def coefficients(self, psi):
        """Block-wise modal coefficients of ``psi`` (None for empty blocks)."""
        out = []
        for b, idx in enumerate(self.blocks):
            v = psi[idx]
            if not np.any(v):
                out.append(None)
                continue
            d = self._decomp(b)
            out.append(d[3] @ v if d[0] == "eig" else v.copy())
        return out

    def evolve(self, coeffs, t):
        return self.evolve_many(coeffs, np.array([t]))[0]

    def evolve_many(self, coeffs, ts):
        """No-jump states at every elapsed time in ``ts``, shape ``(len(ts), dim)``."""
        ts = np.asarray(ts, dtype=float)
        psi = np.zeros((ts.size, self.dim), dtype=complex)
        for b, c in enumerate(coeffs):
            if c is None:
                continue
            d = self._decomp(b)
            if d[0] == "eig":
                psi[:, self.blocks[b]] = (np.exp(-1j * np.outer(ts, d[1])) * c) @ d[2].T
            else:
                psi[:, self.blocks[b]] = [expm(-1j * d[1] * t) @ c for t in ts]
        return psi


def _lower_all(psi, n):
    """``s-_n psi`` for every atom; shape ``(..., n, dim)`` for ``psi`` of shape ``(..., dim)``."""
    idx = np.arange(psi.shape[-1])
    out = np.zeros(psi.shape[:-1] + (n, psi.shape[-1]), dtype=complex)
    for a in range(n):
        sel = idx[(idx >> a) & 1 == 1]
        out[..., a, sel ^ (1 << a)] = psi[..., sel]
    return out


@dataclass
class Trajectory:
    times: np.ndarray
    p_exc: np.ndarray
    gamma_tot: np.ndarray
    jumps: list = field(default_factory=list)       # (time, channel)
    states: Optional[np.ndarray] = None
    correlations: Optional[np.ndarray] = None       # (T, N, N)
    index: int = 0


def _as_pure(psi0) -> PureState:
    if isinstance(psi0, ExcitationSet):
        return incoherent_product_state(psi0)
    if not isinstance(psi0, PureState):
        raise DomainError(f"MCWF needs a pure initial state, got {type(psi0).__name__}")
    return psi0


def evolve_trajectory(model: SystemModel, psi0, times, config: TrajectoryConfig = TrajectoryConfig(),
                      trajectory_index: int = 0, *, store_states: bool = False,
                      correlations: bool = False, _cache=None) -> Trajectory:
    """One quantum trajectory sampled on ``times``.

    Observables are recorded from the normalised state. The random stream
    depends only on ``(config.seed, trajectory_index)``.
    """
    psi = _as_pure(psi0).amplitudes.copy()
    if _cache is None:
        times = _ode.check_time_grid(times)
    prop, chan = _cache or _trajectory_cache(model)
    n = model.n_atoms
    rng = config.rng(trajectory_index)
    G = model.Gamma

    T = times.size
    p_exc = np.empty(T)
    g_tot = np.empty(T)
    states = np.empty((T, psi.size), complex) if store_states else None
    corr = np.empty((T, n, n), complex) if correlations else None
    jumps = []

    def record(ks, raw, norms):
        # raw: (K, dim) unnormalised states for the grid slice ks, norms their squared norms
        phi = raw / np.sqrt(norms)[:, None]
        prob = np.real(phi.conj() * phi)
        p_exc[ks] = prob @ prop.counts
        g_tot[ks] = np.real(np.sum(phi.conj() * (prop.emission @ phi.T).T, axis=1))
        if store_states:
            states[ks] = phi if config.renormalize else raw
        if correlations:
            low = _lower_all(phi, n)
            corr[ks] = np.einsum("kai,kbi->kab", low.conj(), low)

    t0 = 0.0
    coeffs = prop.coefficients(psi)
    threshold = rng.random()
    record(slice(0, 1), psi[None], np.array([np.vdot(psi, psi).real]))
    k = 1
    tol = config.bisection_tol
    ground_stationary = not model.is_driven
    last_norm = 1.0
    while k < T:
        # every remaining grid point on the current no-jump branch at once
        phis = prop.evolve_many(coeffs, times[k:] - t0)
        norms = np.real(np.einsum("ki,ki->k", phis.conj(), phis))
        grew = np.flatnonzero(norms > np.concatenate([[last_norm], norms[:-1]]) + NORM_GROWTH_TOL)
        below = np.flatnonzero(norms <= threshold)
        stop = below[0] if below.size else norms.size
        if grew.size and grew[0] < stop + (1 if below.size else 0):
            raise IntegrationError(f"no-jump norm increased to {norms[grew[0]]:.12g}", times[k + grew[0]])
        if stop:
            record(slice(k, k + stop), phis[:stop], norms[:stop])
            last_norm = float(norms[stop - 1])
            k += stop
        if k >= T:
            break
        # jump inside (t_prev, t_k]
        lo = max(times[k - 1] - t0, 0.0)

        n2 = prop.norm2_function(coeffs)

        def f(s):
            return n2(s) - threshold

        tj = brentq(f, lo, times[k] - t0, xtol=tol, rtol=4 * np.finfo(float).eps) if f(lo) > 0 else lo
        phi = prop.evolve(coeffs, tj)
        phi /= np.linalg.norm(phi)
        amps = chan.vectors @ _lower_all(phi, n)          # C_k phi
        w = chan.rates * np.real(np.sum(amps.conj() * amps, axis=1))
        total = w.sum()
        if total <= 0:
            raise IntegrationError("jump requested from a state with no decay channel", t0 + tj)
        ch = int(np.searchsorted(np.cumsum(w), rng.random() * total, side="right"))
        ch = min(ch, w.size - 1)
        psi = amps[ch] / np.linalg.norm(amps[ch])
        t0 += tj
        jumps.append((float(t0), ch))
        if ground_stationary and not np.any(psi[1:]):
            # the ground state neither evolves nor jumps
            p_exc[k:] = 0.0
            g_tot[k:] = 0.0
            if store_states:
                states[k:] = psi
            if correlations:
                corr[k:] = 0.0
            break
        coeffs = prop.coefficients(psi)
        threshold = rng.random()
        last_norm = 1.0
    return Trajectory(times, p_exc, g_tot, jumps, states, corr,
                      trajectory_index)


def _trajectory_cache(model):
    return _Propagator(model), collective_jump_channels(model.couplings)


class Accumulator:
    """Running sums for ensemble means; merging is associative and commutative."""

    def __init__(self, n_times: int, n_atoms: Optional[int] = None):
        self.count = 0
        self.s_p = np.zeros(n_times)
        self.s_g = np.zeros(n_times)
        self.s_pp = np.zeros(n_times)
        self.s_gg = np.zeros(n_times)
        self.s_pg = np.zeros(n_times)
        self.s_corr = None if n_atoms is None else np.zeros((n_times, n_atoms, n_atoms), complex)
        self.jumps = 0

    def add(self, traj: Trajectory) -> "Accumulator":
        self.count += 1
        self.s_p += traj.p_exc
        self.s_g += traj.gamma_tot
        self.s_pp += traj.p_exc**2
        self.s_gg += traj.gamma_tot**2
        self.s_pg += traj.p_exc * traj.gamma_tot
        if self.s_corr is not None:
            self.s_corr += traj.correlations
        self.jumps += len(traj.jumps)
        return self

    def merge(self, other: "Accumulator") -> "Accumulator":
        out = Accumulator(self.s_p.size)
        out.count = self.count + other.count
        for name in ("s_p", "s_g", "s_pp", "s_gg", "s_pg"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        if self.s_corr is not None and other.s_corr is not None:
            out.s_corr = self.s_corr + other.s_corr
        out.jumps = self.jumps + other.jumps
        return out

    def to_series(self, times, metadata=None) -> ObservableSeries:
        if self.count < 1:
            raise DomainError("empty ensemble")
        m = self.count
        mp, mg = self.s_p / m, self.s_g / m
        if m > 1:
            var_p = np.maximum(self.s_pp / m - mp**2, 0.0) * m / (m - 1)
            var_g = np.maximum(self.s_gg / m - mg**2, 0.0) * m / (m - 1)
            cov = (self.s_pg / m - mp * mg) * m / (m - 1)
            err_p, err_g = np.sqrt(var_p / m), np.sqrt(var_g / m)
        else:
            var_p = var_g = cov = np.zeros_like(mp)
            err_p = err_g = np.zeros_like(mp)
        # ratio of means, error by first-order propagation
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = mg / mp
            var_r = (var_g - 2 * ratio * cov + ratio**2 * var_p) / (m * mp**2)
            err_r = np.sqrt(np.maximum(var_r, 0.0))
        series = ObservableSeries(times, mp, mg, p_exc_err=err_p, gamma_tot_err=err_g,
                                  metadata=dict(metadata or {}))
        series.gamma_inst_err = np.where(np.isfinite(series.gamma_inst), err_r, np.nan)
        if self.s_corr is not None:
            series.correlations = {float(t): self.s_corr[i] / m for i, t in enumerate(times)}
        return series


def ensemble_average(trajectories: Sequence[Trajectory], extractor: Optional[Callable] = None,
                     times=None) -> ObservableSeries:
    """Mean and standard error over trajectories.

    ``extractor(traj) -> (p_exc, gamma_tot)`` replaces the recorded
    observables when given.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise DomainError("empty ensemble")
    times = trajectories[0].times if times is None else times
    with_corr = all(t.correlations is not None for t in trajectories)
    acc = Accumulator(len(times), trajectories[0].correlations.shape[1] if with_corr else None)
    for traj in trajectories:
        if extractor is not None:
            p, g = extractor(traj)
            traj = Trajectory(traj.times, np.asarray(p, float), np.asarray(g, float), traj.jumps,
                              correlations=traj.correlations)
        acc.add(traj)
    return acc.to_series(times, {"backend": "mcwf", "trajectories": acc.count})


def _run_chunk(args):
    model, psi0, times, config, indices, correlations, log = args
    cache = _trajectory_cache(model)
    acc = Accumulator(len(times), model.n_atoms if correlations else None)
    records = []
    for i in indices:
        traj = evolve_trajectory(model, psi0, times, config, i, correlations=correlations, _cache=cache)
        acc.add(traj)
        if log:
            records += [(int(i), t, ch) for t, ch in traj.jumps]
    return acc, records


def run_ensemble(model: SystemModel, psi0, times, config: TrajectoryConfig = TrajectoryConfig(), *,
                 workers: int = 1, correlations: bool = False, index_offset: int = 0,
                 jump_log: Optional[list] = None) -> ObservableSeries:
    """Average ``config.trajectories`` trajectories, optionally over a process pool.

    Results do not depend on ``workers``: every trajectory draws from its own
    stream and the accumulators add up exactly the same terms. When
    ``jump_log`` is a list, ``(trajectory, time, channel)`` tuples are
    appended to it.
    """
    import time as _time

    times = _ode.check_time_grid(times)
    psi0 = _as_pure(psi0)
    m = config.trajectories
    started = _time.perf_counter()
    idx = np.arange(index_offset, index_offset + m)
    # fixed chunking keeps the summation order independent of the pool size
    chunks = [idx[i:i + 100] for i in range(0, m, 100)]
    log = jump_log is not None or config.record_jumps
    jobs = [(model, psi0, times, config, c, correlations, log) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    acc = parts[0][0]
    for part, _ in parts[1:]:
        acc = acc.merge(part)
    if jump_log is not None:
        for _, records in parts:
            jump_log.extend(records)
    meta = {"backend": "mcwf", "trajectories": m, "seed": config.seed,
            "bisection_tol": config.bisection_tol, "mean_jumps": acc.jumps / m,
            "wall_time": _time.perf_counter() - started, **model.metadata()}
    return acc.to_series(times, meta)
