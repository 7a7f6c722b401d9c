"""End-to-end acceptance checks.

Every test records one ``criterion k: PASS/FAIL`` line, collected in the
"acceptance criteria" section of the terminal summary. The N = 10 chain runs
dominate the cost (tens of minutes on one core); ``pytest -m "not acceptance"``
skips them.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage
from scipy.signal import find_peaks

from subradiance.coupling import build_lattice, coupling_matrices
from subradiance.cumulant import evolve_cumulant
from subradiance.harness import config as C
from subradiance.harness import runner
from subradiance.lindblad import SystemModel, evolve_density, probe_series
from subradiance.mcwf import TrajectoryConfig, evolve_trajectory, run_ensemble
from subradiance.observables import burst_ratio, burst_time, subradiant_population
from subradiance.spectral import dynamic_spectra, dynamic_spectrum, late_time_decay_fit, manifold_eigenstates, \
    overlap_series
from subradiance.states import (DensityState, ExcitationSet, checkerboard, coherent_spin_state,
                                incoherent_product_state, random_excitation_sets, to_density)

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]


def _chain(n, a, **kw):
    geo = build_lattice(1, n, a)
    return geo, SystemModel(coupling_matrices(geo), **kw)


def _fmt(x, digits=4):
    return f"{x:.{digits}g}"


# ----------------------------------------------------------------------------- shared N = 10 run

FLOOR_RESTART = 1e-12          # manifolds below this population are dropped when extending the run
FIT_FLOOR = 1e-7               # a manifold's fit window ends where its population first drops below this


@pytest.fixture(scope="module")
def chain10():
    """N = 10 checkerboard at a = 0.15: full run to t = 100, then the surviving manifolds to t = 1000."""
    geo, model = _chain(10, 0.15)
    spec = manifold_eigenstates(model)
    t1 = np.linspace(0.0, 100.0, 1001)
    ev, tot1, _ = overlap_series(model, incoherent_product_state(checkerboard(geo)), t1, spec,
                                 snapshot_times=[20.0, 50.0, 100.0])
    last = ev.snapshot(100.0)
    keep = {k: v for k, v in last.to_blocks(diagonal_only=True).items() if np.trace(v).real > FLOOR_RESTART}
    t2 = np.linspace(0.0, 900.0, 451)
    _, tot2, _ = overlap_series(model, DensityState(blocks=keep, n_atoms=10), t2, spec)
    return {"geometry": geo, "model": model, "spectrum": spec, "evolution": ev, "t1": t1, "tot1": tot1,
            "t2": t2 + 100.0, "tot2": tot2, "dropped": sorted(set(last.to_blocks(True)) - set(keep))}


# ----------------------------------------------------------------------------- criteria

def test_single_atom_exactness(acceptance_report):
    started = time.perf_counter()
    geo = build_lattice(1, 1, 1.0)
    model = SystemModel(coupling_matrices(geo))
    times = np.linspace(0.0, 5.0, 51)
    exact = np.exp(-times)
    up = ExcitationSet([0], 1)
    checks = []

    master = evolve_density(model, incoherent_product_state(up), times, rtol=1e-10, atol=1e-12,
                            method="DOP853").series
    err = np.abs(master.p_exc - exact).max()
    checks.append(("master p_exc", err <= 1e-6, f"max err {err:.1e}"))
    dev = np.abs(master.gamma_inst - 1.0).max()
    checks.append(("master gamma_inst", dev <= 1e-6, f"max |gamma_inst - 1| {dev:.1e}"))

    cum = evolve_cumulant(model, up, times, rtol=1e-10, atol=1e-12, method="DOP853").series
    err = np.abs(cum.p_exc - exact).max()
    checks.append(("cumulant p_exc", err <= 1e-6, f"max err {err:.1e}"))
    dev = np.abs(cum.gamma_inst - 1.0).max()
    checks.append(("cumulant gamma_inst", dev <= 1e-6, f"max |gamma_inst - 1| {dev:.1e}"))

    # the trajectory propagator: survival probability of the no-jump branch. The first
    # uniform draw of a trajectory is its jump threshold, so pick one that never jumps.
    cfg = TrajectoryConfig(seed=0, renormalize=False)
    i = next(i for i in range(10_000) if cfg.rng(i).random() < exact[-1])
    tr = evolve_trajectory(model, up, times, cfg, i, store_states=True)
    assert not tr.jumps
    survival = np.sum(np.abs(tr.states) ** 2, axis=1)
    err = np.abs(survival - exact).max()
    checks.append(("mcwf no-jump norm", err <= 1e-6, f"max err {err:.1e}"))

    mc = run_ensemble(model, up, times, TrajectoryConfig(seed=0))
    live = mc.p_exc > 0
    dev = np.abs(mc.gamma_inst[live] - 1.0).max()
    checks.append(("mcwf gamma_inst", dev <= 1e-6, f"max |gamma_inst - 1| {dev:.1e}"))
    ok = mc.p_exc_err > 0
    z = (np.abs(mc.p_exc - exact)[ok] / mc.p_exc_err[ok]).max()
    checks.append(("mcwf ensemble within 3 SE", z <= 3, f"max deviation {z:.2f} SE"))
    # the literal tolerance applied to the 2000-trajectory ensemble mean
    err = np.abs(mc.p_exc - exact).max()
    checks.append(("mcwf ensemble mean", err <= 1e-6,
                   f"max err {err:.1e}; statistical floor ~{mc.p_exc_err.max():.1e}"))

    elapsed = time.perf_counter() - started
    checks.append(("runtime", elapsed < 1.0, f"{elapsed:.2f} s"))
    acceptance_report(1, "single-atom exactness", checks)


def test_two_atom_dicke_limit(acceptance_report):
    started = time.perf_counter()
    a = 1e-3 / (2 * math.pi)                      # k r = 1e-3
    geo, model = _chain(2, a)
    g12 = model.Gamma[0, 1]
    # analytic 2x2 oracle: H_eff on {|eg>, |ge>} has eigenvectors (|eg> +- |ge>)/sqrt(2)
    # with decay rates 1 +- Gamma_12
    one = manifold_eigenstates(model)[1]
    rates = np.sort(one.mode_rates)
    checks = [("Gamma_12 = 1", abs(g12 - 1.0) <= 1e-5, f"Gamma_12 = {g12:.9f}"),
              ("rates 1 -+ Gamma_12", np.allclose(rates, [1 - g12, 1 + g12], atol=1e-9, rtol=0),
               f"rates {rates[0]:.3e}, {rates[1]:.9f}")]
    sym = np.zeros(4, complex)
    sym[[1, 2]] = 1 / np.sqrt(2)
    t = np.linspace(0, 0.2, 5)
    series = evolve_density(model.replace(coherent_interactions=False),
                            DensityState(np.outer(sym, sym)), t, rtol=1e-10, atol=1e-12).series
    err = np.abs(series.p_exc - np.exp(-(1 + g12) * t)).max()
    checks.append(("symmetric state decays at 1 + Gamma_12", err <= 1e-6, f"max err {err:.1e}"))
    elapsed = time.perf_counter() - started
    checks.append(("runtime", elapsed < 1.0, f"{elapsed:.2f} s"))
    acceptance_report(2, "two-atom Dicke oracle", checks)


def test_backend_cross_validation(acceptance_report):
    n = 6
    geo, model = _chain(n, 0.15)
    sets = [checkerboard(geo)] + random_excitation_sets(n, 3, 3, seed=2024)
    times = np.linspace(0.0, 10.0, 101)
    checks = []
    for s in sets:
        label = "".join("1" if b else "0" for b in s.mask())
        ref = evolve_density(model, incoherent_product_state(s), times).series
        cum = evolve_cumulant(model, s, times).series
        sub = subradiant_population(ref)
        upto = times <= (sub.t_sub if sub else times[-1])
        dp = np.abs(cum.p_exc - ref.p_exc)[upto].max()
        dg = np.abs(cum.gamma_inst - ref.gamma_inst)[upto].max()
        checks.append((f"{label} cumulant", max(dp, dg) <= 0.01 * n, f"p_exc {dp:.3f}, gamma_inst {dg:.3f}"))
        mc = run_ensemble(model, s, times, TrajectoryConfig(trajectories=2000, seed=7))
        ok = mc.p_exc_err > 0
        zp = (np.abs(mc.p_exc - ref.p_exc)[ok] / mc.p_exc_err[ok]).max()
        ok_g = mc.gamma_tot_err > 0
        zg = (np.abs(mc.gamma_tot - ref.gamma_tot)[ok_g] / mc.gamma_tot_err[ok_g]).max()
        checks.append((f"{label} mcwf", max(zp, zg) <= 3, f"p_exc {zp:.2f} SE, gamma_tot {zg:.2f} SE"))
    acceptance_report(3, "backend cross-validation, N = 6", checks)


def test_subradiant_fraction_versus_density(acceptance_report):
    n = 10
    geo, model = _chain(n, 0.15)
    states, labels = [], []
    for k in range(1, n + 1):
        for s in random_excitation_sets(n, k, 50, seed=1000 + k):
            states.append(s)
            labels.append(("incoherent", k))
        states.append(coherent_spin_state(geo, k / n))
        labels.append(("coherent", k))
    series = probe_series(model, states, np.linspace(0.0, 60.0, 601))
    values = {}
    for lab, s in zip(labels, series):
        r = subradiant_population(s)
        values.setdefault(lab, []).append(r.p_sub / n if r else math.nan)
    grid = np.arange(1, n + 1) / n
    inc = np.array([np.mean(values[("incoherent", k)]) for k in range(1, n + 1)])
    coh = np.array([values[("coherent", k)][0] for k in range(1, n + 1)])
    missing = sum(np.isnan(v).sum() for v in values.values())
    checks = [("all sets cross threshold", missing == 0, f"{missing} of {len(series)} never cross"),
              ("incoherent argmax at 0.5", grid[np.nanargmax(inc)] == 0.5,
               f"argmax {grid[np.nanargmax(inc)]}, curve " + " ".join(_fmt(v, 3) for v in inc)),
              ("incoherent peak in 0.15-0.20 +- 0.03", 0.12 <= np.nanmax(inc) <= 0.23, _fmt(np.nanmax(inc))),
              ("coherent argmax at 1.0", grid[np.nanargmax(coh)] == 1.0, f"argmax {grid[np.nanargmax(coh)]}"),
              ("coherent peak < 0.10", np.nanmax(coh) < 0.10, _fmt(np.nanmax(coh)))]
    acceptance_report(4, "p_sub/N versus excitation density, N = 10", checks)


def test_checkerboard_subradiant_fraction(acceptance_report, chain10):
    ev = chain10["evolution"]
    master = subradiant_population(ev.series)
    cum = evolve_cumulant(chain10["model"], checkerboard(chain10["geometry"]), chain10["t1"]).series
    cum = subradiant_population(cum)
    pm, pc = master.p_sub / 10, cum.p_sub / 10
    checks = [("master p_sub/N > 0.20", pm > 0.20, _fmt(pm)),
              ("cumulant within 0.02", abs(pc - pm) <= 0.02, f"cumulant {_fmt(pc)}")]
    acceptance_report(5, "checkerboard p_sub/N, N = 10", checks)


A_SCAN = (0.075, 0.1, 0.125, 0.15, 0.2, 0.3)          # lattice constants for p_sub(a)


def test_coherently_driven_burst(acceptance_report):
    times = np.linspace(0.0, 10.0, 1001)
    psub, bursts = [], {}
    for a in A_SCAN:
        geo, model = _chain(10, a)
        s = evolve_density(model, incoherent_product_state(checkerboard(geo)), times).series
        r = subradiant_population(s)
        psub.append(r.p_sub / 10 if r else math.nan)
        bursts[a] = burst_ratio(s)
    k = int(np.nanargmax(psub))
    checks = [("p_sub(a) interior maximum", 0 < k < len(A_SCAN) - 1,
               f"max at a = {A_SCAN[k]}; " + " ".join(f"{a}:{_fmt(p, 3)}" for a, p in zip(A_SCAN, psub))),
              ("burst at a = 0.075", bursts[0.075] > 1.0, _fmt(bursts[0.075], 6))]
    for a in A_SCAN:
        if a >= 0.15:
            checks.append((f"no burst at a = {a}", abs(bursts[a] - 1.0) <= 1e-3, _fmt(bursts[a], 6)))

    geo, model = _chain(10, 0.075)
    up = incoherent_product_state(checkerboard(geo))
    short = np.linspace(0.0, 1.0, 201)
    on = evolve_density(model, up, short).series
    t_on = burst_time(on)
    off_model = model.replace(coherent_interactions=False)
    off = evolve_density(off_model, up, short).series
    checks.append(("no burst with J = 0", abs(burst_ratio(off) - 1.0) <= 1e-3, _fmt(burst_ratio(off), 6)))
    t_off = burst_time(off)

    def offdiag(model_, t_eval):
        ev = evolve_density(model_, up, short, correlation_times=[t_eval])
        c = ev.series.correlations[t_eval]
        return c - np.diag(np.diag(c))

    own = np.abs(offdiag(off_model, t_off)).max()
    shared = offdiag(off_model, t_on)
    with_j = np.abs(offdiag(model, t_on)).max()
    checks.append(("J = 0 off-diagonals vanish at its burst time", own <= 1e-3,
                   f"t = {t_off:g}: {own:.1e}"))
    checks.append(("J = 0 off-diagonals carry no imaginary part", np.abs(shared.imag).max() <= 1e-9,
                   f"at t = {t_on:g}: |Im| {np.abs(shared.imag).max():.1e}, |C| {np.abs(shared).max():.3f} "
                   f"versus {with_j:.3f} with J"))
    acceptance_report(6, "coherently driven superradiance, N = 10", checks)


QUAD_MAGNITUDES = (5.0, 10.0)


def test_detuning_quadrants(acceptance_report):
    geo, base = _chain(3, 0.075)
    times = np.linspace(0.0, 10.0, 2001)

    def ratio(up, d1, d3):
        model = base.replace(detunings=[d1, 0.0, d3])
        return burst_ratio(probe_series(model, [ExcitationSet(up, 3)], times)[0])

    edge0 = ratio([0, 2], 0.0, 0.0)
    checks = [("edge atoms, zero detuning = 1.07 +- 0.02", abs(edge0 - 1.07) <= 0.02, _fmt(edge0))]
    for d in QUAD_MAGNITUDES:
        pp = ratio([0, 2], d, d)
        others = {sgn: ratio([0, 2], sgn[0] * d, sgn[1] * d) for sgn in ((1, -1), (-1, 1), (-1, -1))}
        checks.append((f"edge atoms, |delta| = {d}: (+,+) enhanced", pp > edge0, _fmt(pp)))
        checks.append((f"edge atoms, |delta| = {d}: other quadrants suppressed",
                       all(v < edge0 for v in others.values()),
                       ", ".join(f"{k}: {_fmt(v)}" for k, v in others.items())))
    nb0 = ratio([0, 1], 0.0, 0.0)
    checks.append(("neighbours, zero detuning: no peak", abs(nb0 - 1.0) <= 1e-3, _fmt(nb0, 6)))
    for d in QUAD_MAGNITUDES:
        pm = ratio([0, 1], d, -d)
        others = {sgn: ratio([0, 1], sgn[0] * d, sgn[1] * d) for sgn in ((1, 1), (-1, 1), (-1, -1))}
        checks.append((f"neighbours, |delta| = {d}: (+,-) burst", pm > 1.0 + 1e-3, _fmt(pm)))
        checks.append((f"neighbours, |delta| = {d}: (+,-) largest", all(v < pm for v in others.values()),
                       ", ".join(f"{k}: {_fmt(v)}" for k, v in others.items())))
    acceptance_report(7, "three-atom detuning quadrants", checks)



def test_manifold_overlaps_and_rates(acceptance_report, chain10):
    t = np.concatenate([chain10["t1"], chain10["t2"][1:]])
    tot = np.vstack([chain10["tot1"], chain10["tot2"][1:]])
    spec = chain10["spectrum"]
    err = np.abs(chain10["tot1"].sum(axis=1) - 1.0).max()
    checks = [("sum of overlaps = 1", err <= 1e-9, f"max err {err:.1e}")]
    err2 = np.abs(chain10["tot2"].sum(axis=1) - 1.0).max()
    checks.append(("sum of overlaps = 1 after restart", err2 <= 1e-9, f"max err {err2:.1e}"))
    k10 = int(np.argmin(np.abs(chain10["t1"] - 10.0)))
    high = chain10["tot1"][k10, 2:].sum()
    checks.append(("O_{N_exc > 1}(t = 10) > 0.01", high > 0.01, _fmt(high)))
    for p in range(1, 6):
        k0 = int(np.argmax(tot[:, p]))
        below = np.flatnonzero(tot[k0:, p] < FIT_FLOOR)
        t_end = t[k0 + below[0]] if below.size else t[-1]
        fit = late_time_decay_fit(t, tot[:, p], (t_end / 2, t_end))
        rel = fit.rate / spec[p].darkest_rate
        checks.append((f"manifold {p} late rate", abs(rel - 1) <= 0.10,
                       f"fit {fit.rate:.5f} on [{t_end / 2:g}, {t_end:g}] versus {spec[p].darkest_rate:.5f}"))
    acceptance_report(8, "manifold overlaps and late-time rates, N = 10", checks)


SPECTRUM_TAU_MAX = 200.0
SPECTRUM_DAMPING = math.log(1e3) / SPECTRUM_TAU_MAX     # window down to 1e-3 at tau_max
SPECTRUM_FLOOR = 1e-3                                   # manifolds below this population are left out


def test_spectrum_lines(acceptance_report, chain10):
    omega = np.linspace(-5.0, 5.0, 1001)
    bin_ = omega[1] - omega[0]
    one = build_lattice(1, 1, 1.0)
    res = dynamic_spectrum(SystemModel(coupling_matrices(one)),
                           to_density(incoherent_product_state(ExcitationSet([0], 1))), omega, tau_max=60)
    above = omega[res.total >= res.total.max() / 2]
    width = above[-1] - above[0]
    checks = [("single-atom FWHM = 1", abs(width - 1.0) <= bin_, f"{width:.3f} on a {bin_:.3f} grid")]

    omega = np.linspace(-4.0, 4.0, 801)
    bin_ = omega[1] - omega[0]
    ev = chain10["evolution"]
    res = dynamic_spectra(chain10["model"], {20.0: ev.snapshot(20.0), 50.0: ev.snapshot(50.0)}, omega,
                          tau_max=SPECTRUM_TAU_MAX, damping=SPECTRUM_DAMPING, block_floor=SPECTRUM_FLOOR)
    lines = {}
    for tp, r in res.items():
        idx, _ = find_peaks(r.total, height=0.05 * r.total.max())
        lines[tp] = idx
    shifts = [int(np.min(np.abs(lines[20.0] - k))) for k in lines[50.0]]
    checks.append(("lines present", lines[50.0].size > 0, f"{lines[50.0].size} lines at t' = 50"))
    checks.append(("line centres fixed between t' = 20 and 50", max(shifts, default=99) < 1,
                   "t' = 50 lines " + " ".join(f"{omega[k]:.2f}" for k in lines[50.0])
                   + f"; max shift {max(shifts, default=99)} bins"))
    acceptance_report(9, "fluorescence spectra", checks)


PREP_RABI = (5.0, 10.0, 20.0)
PREP_DETUNING = (20.0, 50.0, 100.0, 200.0, 400.0)


def test_preparation_scan(acceptance_report, tmp_path):
    cfg = C.validate({"geometry": {"counts": [6], "lattice_constant": 0.15, "rabi": PREP_RABI[0]},
                      "scan": {"mode": "prep", "axes": [{"parameter": "rabi", "values": list(PREP_RABI)},
                                                        {"parameter": "detuning", "values": list(PREP_DETUNING)}]}})
    rows = runner.scan(cfg, tmp_path)["rows"]
    F = np.array([r["fidelity"] for r in rows]).reshape(len(PREP_RABI), len(PREP_DETUNING))
    good = F > 0.9
    labels, count = ndimage.label(good)
    om, de = np.meshgrid(PREP_RABI, PREP_DETUNING, indexing="ij")
    target = (de >= 5 * om) & (om >= 10)
    hit = [lab for lab in range(1, count + 1) if np.any(target & (labels == lab))]
    table = "; ".join(f"Omega {o:g}: " + " ".join(_fmt(f, 3) for f in row) for o, row in zip(PREP_RABI, F))
    checks = [("connected F > 0.9 region reaching Delta >= 5 Omega, Omega >= 10", bool(hit),
               f"Delta {list(PREP_DETUNING)}; {table}")]
    acceptance_report(10, "state preparation, N = 6", checks)



def test_property_suite_standalone(acceptance_report):
    started = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-m", "property", "-q", "-p", "no:cacheprovider",
                           str(ROOT / "tests")], cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - started
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    checks = [("green", proc.returncode == 0, tail), ("under 2 minutes", elapsed < 120, f"{elapsed:.1f} s")]
    acceptance_report(11, "standalone property suite", checks)
