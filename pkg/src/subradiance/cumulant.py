"""Third-order cumulant expansion for undriven arrays without one-body coherences.

Notation used below (all site indices pairwise distinct)::

    p_i      = <n_i>                    n = s+ s- = |e><e|
    c_ij     = <s+_i s-_j>
    pp_ij    = <n_i n_j>
    q_ijk    = <n_i s+_j s-_k>
    r_ijk    = <n_i n_j n_k>

With ``K = J - i Gamma / 2`` (zero diagonal) and ``g_i = Gamma_ii`` the exact
Heisenberg equations read::

    dp_i   = -g_i p_i - 2 Re sum_j i K_ij c_ij
    dc_ij  = [i(D_i - D_j) - (g_i + g_j)/2] c_ij + i J_ij (p_j - p_i)
             + Gamma_ij (2 pp_ij - (p_i + p_j)/2)
             + sum_k [i K*_ik c_kj - i K_jk c_ik - 2i K*_ik q_ikj + 2i K_jk q_jik]
    dpp_ij = -(g_i + g_j) pp_ij - 2 Re sum_k [i K_ik q_jik + i K_jk q_ijk]
    dq_ijk = [i(D_j - D_k) - g_i - (g_j + g_k)/2] q_ijk
             + i J_jk (pp_ik - pp_ij) - i K_ij q_jik + i K*_ik q_kji
             + 2 Gamma_jk r_ijk - Gamma_jk (pp_ij + pp_ik)/2
             + sum_l [-i K_il <s+_i s+_j s-_l s-_k> + i K*_il <s+_l s+_j s-_i s-_k>
                      + i K*_jl q_ilk - 2i K*_jl <n_i n_j s+_l s-_k>
                      - i K_kl q_ijl + 2i K_kl <n_i n_k s+_j s-_l>]
    dr_ijk = -(g_i + g_j + g_k) r_ijk
             - 2 Re sum_l [i K_il <n_j n_k s+_i s-_l> + (j) + (k)]

where sums run over indices distinct from the fixed ones. The four-body
averages are closed with :func:`cumulant_closure`; in this sector every
average containing an odd number of raising/lowering operators vanishes.
"""

from __future__ import annotations

import time as _time
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import _ode
from .errors import CapacityError, ConsistencyError, DomainError, UnsupportedStateError
from .observables import ObservableSeries
from .states import CumulantState, ExcitationSet, PureState, _distinct_mask, to_cumulant

MAX_CUMULANT_ATOMS = 40
POPULATION_SLACK = 1e-3

EE, EG, GE = "ee", "eg", "ge"


def moment(state: CumulantState, ops) -> complex:
    """Expectation of a product of at most three single-site operators.

    ``ops`` is a sequence of ``(label, site)`` with distinct sites and labels
    ``"ee"`` (population), ``"eg"`` (raising) or ``"ge"`` (lowering).
    Products outside the stored families vanish in this sector.
    """
    ops = list(ops)
    sites = [s for _, s in ops]
    if len(set(sites)) != len(sites):
        raise ConsistencyError(f"repeated site in {ops}; reduce same-atom products first")
    if not ops:
        return 1.0
    ee = [s for lab, s in ops if lab == EE]
    eg = [s for lab, s in ops if lab == EG]
    ge = [s for lab, s in ops if lab == GE]
    if len(eg) != len(ge):
        return 0.0
    order = len(ops)
    if order == 1:
        return state.pop[ee[0]]
    if order == 2:
        return state.pp[ee[0], ee[1]] if ee else state.coh[eg[0], ge[0]]
    if order == 3:
        if len(ee) == 3:
            return state.ppp[ee[0], ee[1], ee[2]]
        if len(ee) == 1:
            return state.pcoh[ee[0], eg[0], ge[0]]
        return 0.0
    raise ConsistencyError("moments above third order must go through cumulant_closure")


def cumulant_closure(ops, state: CumulantState) -> complex:
    """Four-body average with the fourth-order joint cumulant set to zero.

    Expands ``<O1 O2 O3 O4>`` into singles times triples, pairs times pairs,
    singles-singles-pairs (weight -2) and the product of singles (weight +6).
    """
    ops = list(ops)
    if len(ops) != 4:
        raise ConsistencyError("closure needs exactly four operators")
    if len({s for _, s in ops}) != 4:
        raise ConsistencyError(f"same-atom operators reached the closure: {ops}")
    idx = range(4)
    m = {}
    for r in (1, 2, 3):
        for sub in combinations(idx, r):
            m[sub] = moment(state, [ops[i] for i in sub])
    total = 0.0
    for i in idx:
        rest = tuple(j for j in idx if j != i)
        total += m[(i,)] * m[rest]
    for pair in ((0, 1), (0, 2), (0, 3)):
        rest = tuple(j for j in idx if j not in pair)
        total += m[pair] * m[rest]
    for a, b in combinations(idx, 2):
        rest = tuple(j for j in idx if j not in (a, b))
        total -= 2 * m[(a,)] * m[(b,)] * m[rest]
    total += 6 * m[(0,)] * m[(1,)] * m[(2,)] * m[(3,)]
    return total


class _Couplings:
    def __init__(self, model):
        J = np.array(model.J, dtype=float)
        G = np.array(model.Gamma, dtype=float)
        self.g = np.diag(G).copy()
        np.fill_diagonal(J, 0.0)
        np.fill_diagonal(G, 0.0)
        self.J, self.G = J, G
        self.K = J - 0.5j * G
        self.Kc = self.K.conj()
        self.det = np.asarray(model.detunings, dtype=float)
        n = J.shape[0]
        self.mask2 = _distinct_mask(n, 2)
        self.mask3 = _distinct_mask(n, 3)


def _perm(a, spec):
    return np.einsum(spec, a)


def _rhs_arrays(cp: _Couplings, p, c, pp, q, r):
    K, Kc, J, G, g, det = cp.K, cp.Kc, cp.J, cp.G, cp.g, cp.det
    n = p.size

    # populations
    s = np.sum(K * c, axis=1)                       # s_i = sum_l K_il c_il
    dp = -g * p - 2 * np.real(1j * s)

    # two-body coherences
    Kc_c = Kc @ c                                   # [i,j] = sum_k K*_ik c_kj
    c_K = c @ K                                     # [i,j] = sum_k c_ik K_kj
    t_q1 = np.einsum("ik,ikj->ij", Kc, q)           # sum_k K*_ik q_ikj
    t_q2 = np.einsum("jk,jik->ij", K, q)            # sum_k K_jk q_jik
    dc = ((1j * (det[:, None] - det[None, :]) - 0.5 * (g[:, None] + g[None, :])) * c
          + 1j * J * (p[None, :] - p[:, None])
          + G * (2 * pp - 0.5 * (p[:, None] + p[None, :]))
          + 1j * Kc_c - 1j * c_K - 2j * t_q1 + 2j * t_q2)
    dc *= cp.mask2

    # population pairs
    u1 = np.einsum("ik,jik->ij", K, q)
    u2 = np.einsum("jk,ijk->ij", K, q)
    dpp = -(g[:, None] + g[None, :]) * pp - 2 * np.real(1j * (u1 + u2))
    dpp *= cp.mask2

    # helpers, all sums over l automatically skip l equal to an index whose
    # coupling or moment vanishes; the remaining coincidences are subtracted
    P_i, P_j, P_k = p[:, None, None], p[None, :, None], p[None, None, :]
    F = K @ c.T                                     # F[i,j] = sum_l K_il c_jl
    Gm = Kc_c                                       # Gm[i,k] = sum_l K*_il c_lk
    H1 = np.matmul(Kc, q)                           # [i,j,k] = sum_l K*_jl q_ilk
    H2 = np.matmul(q, K)                            # [i,j,k] = sum_l K_kl q_ijl
    A = np.einsum("jl,jlk->jk", Kc, q)              # A[j,k] = sum_l K*_jl q_jlk
    B = np.einsum("kl,kjl->kj", K, q)               # B[k,j] = sum_l K_kl q_kjl

    ij = (slice(None), slice(None), None)
    ik = (slice(None), None, slice(None))
    jk = (None, slice(None), slice(None))
    cT, KT, KcT = c.T, K.T, Kc.T
    q_jik = _perm(q, "jik->ijk")
    q_kji = _perm(q, "kji->ijk")
    q_kij = _perm(q, "kij->ijk")
    s_i = s[:, None, None]

    # -i K_il <s+_i s+_j s-_l s-_k> ~ c_il c_jk + c_ik c_jl
    x1 = (c[jk] * (s_i - (K * c)[ij] - (K * c)[ik])
          + c[ik] * (F[ij] - K[ik] * c[jk]))
    # i K*_il <s+_l s+_j s-_i s-_k> ~ c_li c_jk + c_lk c_ji
    x2 = (c[jk] * (np.conj(s)[:, None, None] - (Kc * cT)[ij] - (Kc * cT)[ik])
          + cT[ij] * (Gm[ik] - Kc[ij] * c[jk]))
    # -2i K*_jl <n_i n_j s+_l s-_k>
    x3 = (P_i * (A[jk] - KcT[ij] * q_jik)
          + P_j * H1
          + (pp[ij] - 2 * P_i * P_j) * (Gm[jk] - KcT[ij] * c[ik]))
    # 2i K_kl <n_i n_k s+_j s-_l>
    x4 = (P_i * (B.T[jk] - KT[ik] * q_kji)
          + P_k * H2
          + (pp[ik] - 2 * P_i * P_k) * (F.T[jk] - KT[ik] * cT[ij]))
    dq = ((1j * (det[None, :, None] - det[None, None, :])
           - g[:, None, None] - 0.5 * (g[None, :, None] + g[None, None, :])) * q
          + 1j * J[jk] * (pp[ik] - pp[ij])
          - 1j * K[ij] * q_jik + 1j * Kc[ik] * q_kji
          + 2 * G[jk] * r - 0.5 * G[jk] * (pp[ij] + pp[ik])
          - 1j * x1 + 1j * x2 + 1j * H1 - 2j * x3 - 1j * H2 + 2j * x4)
    dq *= cp.mask3

    # population triples: T1[i,j,k] = sum_l K_il <n_j n_k s+_i s-_l>
    E1 = np.einsum("il,kil->ik", K, q)              # sum_l K_il q_kil
    T1 = (P_j * (E1[ik] - K[ij] * q_kij)
          + P_k * (E1[ij] - K[ik] * q_jik)
          + (pp[jk] - 2 * P_j * P_k) * (s_i - (K * c)[ij] - (K * c)[ik]))
    T = T1 + _perm(T1, "jik->ijk") + _perm(T1, "kij->ijk")
    dr = -(g[:, None, None] + g[None, :, None] + g[None, None, :]) * r - 2 * np.real(1j * T)
    dr *= cp.mask3
    return dp, dc, dpp, dq, dr


def _check_model(model):
    if model.is_driven:
        raise DomainError("the cumulant backend only handles undriven dynamics")
    if model.n_atoms > MAX_CUMULANT_ATOMS:
        raise CapacityError(f"{model.n_atoms} atoms exceed the cumulant cap of {MAX_CUMULANT_ATOMS}")


def cumulant_rhs(model, state: CumulantState) -> CumulantState:
    """Time derivative of every stored moment."""
    _check_model(model)
    if state.n_atoms != model.n_atoms:
        raise DomainError("moment arrays and model have different atom numbers")
    d = _rhs_arrays(_Couplings(model), state.pop, state.coh, state.pp, state.pcoh, state.ppp)
    return CumulantState(d[0], d[1], d[2].real, d[3], d[4].real)


@dataclass
class CumulantEvolution:
    series: ObservableSeries
    snapshots: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)


def evolve_cumulant(model, state0, times, *, rtol=1e-8, atol=1e-10, method="RK45",
                    snapshot_times=(), correlation_times=()) -> CumulantEvolution:
    """Integrate the closed moment equations and record observables on ``times``.

    Populations leaving ``[-1e-3, 1 + 1e-3]`` are reported in
    ``diagnostics`` (and as a warning); they are never clipped.
    """
    _check_model(model)
    if isinstance(state0, (ExcitationSet, PureState)):
        state0 = to_cumulant(state0)
    if not isinstance(state0, CumulantState):
        raise UnsupportedStateError(f"cannot integrate moments from {type(state0).__name__}")
    n = model.n_atoms
    if state0.n_atoms != n:
        raise DomainError("initial moments and model have different atom numbers")
    cp = _Couplings(model)
    s2, s3 = n * n, n**3
    o = np.cumsum([0, n, s2, s2, s3, s3])

    def unpack(y):
        return (y[o[0]:o[1]].real, y[o[1]:o[2]].reshape(n, n), y[o[2]:o[3]].real.reshape(n, n),
                y[o[3]:o[4]].reshape(n, n, n), y[o[4]:o[5]].real.reshape(n, n, n))

    def fun(t, y):
        return np.concatenate([a.ravel() for a in _rhs_arrays(cp, *unpack(y))]).astype(complex)

    obs_times = _ode.check_time_grid(times)
    extra = sorted(set(snapshot_times) | set(correlation_times))
    grid = np.union1d(obs_times, extra)
    obs_index = {t: i for i, t in enumerate(obs_times)}
    snap_set, corr_set = set(snapshot_times), set(correlation_times)
    p_exc = np.empty(obs_times.size)
    g_tot = np.empty(obs_times.size)
    snapshots, correlations, diagnostics = {}, {}, []
    gdiag = cp.g

    def callback(k, t, y):
        pop, coh, *_ = unpack(y)
        if t in obs_index:
            i = obs_index[t]
            p_exc[i] = pop.sum()
            g_tot[i] = np.sum(gdiag * pop) + np.real(np.sum(cp.G * coh))
            lo, hi = pop.min(), pop.max()
            if lo < -POPULATION_SLACK or hi > 1 + POPULATION_SLACK:
                diagnostics.append({"t": float(t), "min_population": float(lo), "max_population": float(hi)})
        if t in snap_set or t in corr_set:
            st = CumulantState.from_vector(np.asarray(y), n)
            if t in snap_set:
                snapshots[t] = st
            if t in corr_set:
                corr = st.coh.copy()
                np.fill_diagonal(corr, st.pop)
                correlations[t] = corr

    started = _time.perf_counter()
    _ode.integrate(fun, state0.to_vector(), grid, callback, rtol=rtol, atol=atol, method=method)
    if diagnostics:
        warnings.warn(f"cumulant populations left [0, 1] at {len(diagnostics)} output times", RuntimeWarning)
    meta = {"backend": "cumulant", "rtol": rtol, "atol": atol, "method": method,
            "population_violations": len(diagnostics), "wall_time": _time.perf_counter() - started,
            **model.metadata()}
    series = ObservableSeries(obs_times, p_exc, g_tot, correlations=correlations, metadata=meta)
    return CumulantEvolution(series, snapshots, diagnostics)
