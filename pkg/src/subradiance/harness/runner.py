"""Execute validated configs: single runs, parameter scans and spectra.

Every run writes into its own directory: ``series.csv`` plus optional
correlation, overlap, fit, spectrum and jump tables, and ``metadata.json``
describing parameters, seeds, tolerances and the library version.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import platform
import time as _time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from ..basis import MAX_DENSE_ATOMS
from ..cumulant import MAX_CUMULANT_ATOMS, evolve_cumulant
from ..errors import CapacityError, ConfigError
from ..lindblad import evolve_density, probe_series
from ..mcwf import TrajectoryConfig, run_ensemble
from ..observables import ObservableSeries, burst_ratio, fidelity, subradiant_population
from ..spectral import dynamic_spectra, late_time_decay_fit, manifold_eigenstates, manifold_overlaps
from ..states import (ExcitationSet, PureState, checkerboard, coherent_spin_state, incoherent_product_state,
                      random_excitation_sets)
from . import config as C

MASTER_AUTO_LIMIT = 10
PREP_POINTS = 4000


def time_grid(cfg) -> np.ndarray:
    s = cfg["solver"]
    steps = max(1, int(round(s["t_max"] / s["dt"])))
    return np.linspace(0.0, s["t_max"], steps + 1)


def point_seed(base: int, coords=()) -> int:
    """Seed for one scan point, derived from the base seed and its grid coordinates."""
    return int(np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(c) for c in coords))
               .generate_state(1)[0])


def initial_states(cfg, geometry, seed) -> list:
    st = cfg["state"]
    n = geometry.n_atoms
    kind = st["kind"]
    if kind == "checkerboard":
        return [checkerboard(geometry, st["parity"])]
    if kind == "excited":
        return [ExcitationSet(st["indices"], n)]
    if kind == "ground":
        return [ExcitationSet([], n)]
    if kind == "inverted":
        return [ExcitationSet(range(n), n)]
    if kind == "random":
        k = int(round(st["n_exc"] * n))
        return random_excitation_sets(n, k, st["sets"], seed)
    if kind == "coherent":
        if n > MAX_DENSE_ATOMS:
            raise CapacityError(f"coherent states need the dense representation (N <= {MAX_DENSE_ATOMS})")
        return [coherent_spin_state(geometry, st["n_exc"], st.get("k"))]
    raise ConfigError(f"unknown state kind {kind!r}", "state/kind")


def select_backend(cfg, n: int) -> str:
    backend = cfg["solver"]["backend"]
    obs = cfg["observables"]
    if backend != "auto":
        return backend
    if n <= MASTER_AUTO_LIMIT or "spectrum" in obs or obs["overlaps"] or obs["fidelity"] \
            or cfg["geometry"]["rabi"] != 0 or cfg["state"]["kind"] == "coherent":
        return "master"
    return "cumulant"


def _check_capacity(backend, n):
    if backend in ("master", "mcwf") and n > MAX_DENSE_ATOMS:
        raise CapacityError(f"{n} atoms exceed the dense cap of {MAX_DENSE_ATOMS}; use the cumulant backend")
    if backend == "cumulant" and n > MAX_CUMULANT_ATOMS:
        raise CapacityError(f"{n} atoms exceed the cumulant cap of {MAX_CUMULANT_ATOMS}")


def _label(state) -> str:
    if isinstance(state, ExcitationSet):
        return " ".join(str(i) for i in state.sorted())
    return "pure"


def _tol(cfg) -> dict:
    s = cfg["solver"]
    return {"rtol": s["rtol"], "atol": s["atol"], "method": s["method"]}


def _mean_series(series: list, meta: dict) -> ObservableSeries:
    if len(series) == 1:
        out = series[0]
        out.metadata.update(meta)
        return out
    p = np.mean([s.p_exc for s in series], axis=0)
    g = np.mean([s.gamma_tot for s in series], axis=0)
    return ObservableSeries(series[0].times, p, g, metadata=meta)


def _summaries(series: list, states: list, threshold: float, n: int) -> tuple:
    rows = []
    for st, s in zip(states, series):
        sub = subradiant_population(s, threshold)
        try:
            br = burst_ratio(s)
        except Exception:
            br = math.nan
        rows.append({"state": _label(st), "p_sub": sub.p_sub if sub else math.nan,
                     "t_sub": sub.t_sub if sub else math.nan,
                     "multiple_crossings": bool(sub.multiple_crossings) if sub else False,
                     "burst_ratio": br})
    psub = np.array([r["p_sub"] for r in rows]) / n
    ok = np.isfinite(psub)
    agg = {
        "n_states": len(rows),
        "missing_crossings": int((~ok).sum()),
        "p_sub_over_n_mean": float(psub[ok].mean()) if ok.any() else math.nan,
        "p_sub_over_n_std": float(psub[ok].std()) if ok.any() else math.nan,
        "t_sub_mean": float(np.nanmean([r["t_sub"] for r in rows])) if ok.any() else math.nan,
        "burst_ratio_mean": float(np.nanmean([r["burst_ratio"] for r in rows])),
        "burst_ratio_max": float(np.nanmax([r["burst_ratio"] for r in rows])),
        "multiple_crossings": any(r["multiple_crossings"] for r in rows),
    }
    return rows, agg


def _write_matrix(path, m):
    n = m.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + [str(j) for j in range(n)])
        for i in range(n):
            w.writerow([str(i)] + [repr(complex(x)) for x in m[i]])


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_metadata(out: Path, meta: dict):
    with open(out / "metadata.json", "w") as fh:
        json.dump(_jsonable(meta), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _base_metadata(cfg, seed, backend):
    return {"library_version": __version__, "python": platform.python_version(), "seed": seed,
            "backend": backend, "config": cfg, "tolerances": _tol(cfg)}


# --------------------------------------------------------------------------- evolution

def _prepare(cfg, model):
    """Driven run from the ground state; fidelity with the checkerboard at the first inversion maximum."""
    geometry = C.build_geometry(cfg)
    target = incoherent_product_state(checkerboard(geometry, cfg["state"]["parity"]))
    omega = abs(cfg["geometry"]["rabi"])
    t_end = min(cfg["solver"]["t_max"], 2 * math.pi / omega)
    times = np.linspace(0.0, t_end, PREP_POINTS + 1)
    ground = incoherent_product_state(ExcitationSet([], model.n_atoms))
    ev = evolve_density(model, ground, times, observers={"fidelity": lambda t, r: fidelity(target, r)},
                        engine="dense", **_tol(cfg))
    p = ev.series.p_exc
    peaks = np.flatnonzero((p[1:-1] >= p[:-2]) & (p[1:-1] > p[2:])) + 1
    k = int(peaks[0]) if peaks.size else int(np.argmax(p))
    return {"t_max_inversion": float(times[k]), "fidelity": float(ev.observed["fidelity"][k]),
            "max_population": float(p[k] / model.n_atoms), "inversion_peak_found": bool(peaks.size)}, ev


def _simulate(cfg, model, states, backend, seed, workers=1, jump_log=None):
    """Observable series for every initial state plus optional extras."""
    times = time_grid(cfg)
    obs = cfg["observables"]
    solver = cfg["solver"]
    extras = {"correlations": {}, "overlaps": None, "snapshots": {}}
    tol = _tol(cfg)
    if backend == "cumulant":
        series = []
        for st in states:
            ev = evolve_cumulant(model, st, times, correlation_times=obs["correlation_times"], **tol)
            series.append(ev.series)
            extras["correlations"] = ev.series.correlations if len(states) == 1 else {}
        return series, extras
    if backend == "mcwf":
        series = []
        for i, st in enumerate(states):
            tc = TrajectoryConfig(trajectories=solver["trajectories"], seed=point_seed(seed, (i,)),
                                  bisection_tol=solver["bisection_tol"], record_jumps=solver["jump_log"])
            s = run_ensemble(model, st, times, tc, workers=workers,
                             correlations=bool(obs["correlation_times"]), jump_log=jump_log)
            series.append(s)
        if len(states) == 1 and obs["correlation_times"]:
            extras["correlations"] = {t: series[0].correlations[t] for t in obs["correlation_times"]
                                      if t in series[0].correlations}
        return series, extras
    # master
    needs_state = (obs["correlation_times"] or obs["overlaps"] or "spectrum" in obs
                   or solver["snapshot_times"] or model.is_driven or solver["method"] == "fixed")
    if not needs_state:
        return probe_series(model, states, times, **tol), extras
    snaps = set(solver["snapshot_times"])
    if "spectrum" in obs:
        snaps |= set(obs["spectrum"]["t_prime"])
    spectrum = manifold_eigenstates(model) if obs["overlaps"] else None
    observers = {"overlaps": lambda t, r: manifold_overlaps(r, spectrum)} if spectrum else None
    series, ov_all = [], []
    for st in states:
        psi = incoherent_product_state(st) if isinstance(st, ExcitationSet) else st
        ev = evolve_density(model, psi, times, snapshot_times=sorted(snaps),
                            correlation_times=obs["correlation_times"], observers=observers,
                            fixed_step=solver.get("fixed_step"), **tol)
        series.append(ev.series)
        if spectrum:
            ov_all.append(ev.observed["overlaps"])
        if len(states) == 1:
            extras["correlations"] = ev.series.correlations
            extras["snapshots"] = ev.snapshots
    if spectrum:
        totals = np.mean([[o.totals for o in ovs] for ovs in ov_all], axis=0)
        final = [np.mean([ovs[i].per_state[p] for ovs in ov_all], axis=0)
                 for i in (len(times) - 1,) for p in range(model.n_atoms + 1)]
        extras["overlaps"] = {"spectrum": spectrum, "totals": totals, "final_per_state": final}
    return series, extras


# --------------------------------------------------------------------------- verbs

def _outdir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def run(cfg: dict, out, *, workers: int = 1, seed=None, spectra: bool = True) -> dict:
    """Run one configured experiment and write its outputs to ``out``."""
    started = _time.perf_counter()
    seed = cfg["solver"]["seed"] if seed is None else int(seed)
    out = _outdir(out)
    geometry = C.build_geometry(cfg)
    n = geometry.n_atoms
    backend = select_backend(cfg, n)
    _check_capacity(backend, n)
    model = C.build_model(cfg, geometry)
    meta = _base_metadata(cfg, seed, backend)
    meta["model"] = model.metadata()
    meta["files"] = []

    if model.is_driven:
        prep, ev = _prepare(cfg, model)
        ev.series.to_csv(out / "series.csv")
        meta["files"].append("series.csv")
        meta["preparation"] = prep
        meta["wall_time"] = _time.perf_counter() - started
        _write_metadata(out, meta)
        return meta

    states = initial_states(cfg, geometry, seed)
    jump_log = [] if cfg["solver"]["jump_log"] and backend == "mcwf" else None
    series, extras = _simulate(cfg, model, states, backend, seed, workers, jump_log)
    rows, agg = _summaries(series, states, cfg["observables"]["threshold"], n)
    mean = _mean_series(series, {"backend": backend})
    mean.to_csv(out / "series.csv")
    meta["files"].append("series.csv")
    meta["solver_metadata"] = {k: v for k, v in series[0].metadata.items() if not isinstance(v, np.ndarray)}
    meta["summary"] = agg
    meta["per_state"] = rows

    for t, m in extras["correlations"].items():
        name = f"correlations_t{t:g}.csv"
        _write_matrix(out / name, m)
        meta["files"].append(name)
    if jump_log:
        _write_rows(out / "jumps.csv", ["trajectory", "time", "channel"], jump_log)
        meta["files"].append("jumps.csv")
    ov = extras["overlaps"]
    if ov is not None:
        times = time_grid(cfg)
        _write_rows(out / "overlaps.csv", ["t"] + [f"O_{p}" for p in range(n + 1)],
                    [[t, *row] for t, row in zip(times, ov["totals"])])
        spec = ov["spectrum"]
        table = []
        for p, vals in enumerate(ov["final_per_state"]):
            for i, o in enumerate(vals):
                table.append([p, i, spec[p].energies[i], spec[p].decay_rates[i], o])
        _write_rows(out / "overlap_states.csv", ["manifold", "state", "energy", "decay_rate", "overlap"], table)
        meta["files"] += ["overlaps.csv", "overlap_states.csv"]
        window = cfg["observables"].get("fit_window")
        if window:
            fits = []
            for p in range(1, n + 1):
                try:
                    f = late_time_decay_fit(times, ov["totals"][:, p], window)
                    fits.append([p, f.rate, spec[p].darkest_rate, f.residual])
                except Exception:
                    fits.append([p, math.nan, spec[p].darkest_rate, math.nan])
            _write_rows(out / "fits.csv", ["manifold", "fitted_rate", "darkest_mode_rate", "residual"], fits)
            meta["files"].append("fits.csv")
    if spectra and "spectrum" in cfg["observables"]:
        meta["spectra"] = _spectra(cfg, model, extras["snapshots"], out, meta["files"])
    meta["wall_time"] = _time.perf_counter() - started
    _write_metadata(out, meta)
    return meta


def _spectra(cfg, model, snapshots, out, files):
    sp = cfg["observables"]["spectrum"]
    if cfg["state"]["kind"] == "random" and cfg["state"]["sets"] > 1:
        raise ConfigError("spectra are computed for a single initial state", "state/sets")
    omega = np.linspace(sp["omega_min"], sp["omega_max"], sp["n_omega"])
    states = {float(t): snapshots[min(snapshots, key=lambda s: abs(s - t))] for t in sp["t_prime"]}
    res = dynamic_spectra(model, states, omega, tau_max=sp["tau_max"], dtau=sp["dtau"],
                          per_atom=sp["per_atom"], damping=sp["damping"],
                          block_floor=sp["block_floor"], **_tol(cfg))
    info = {}
    for tp, r in res.items():
        name = f"spectrum_t{tp:g}.csv"
        r.to_csv(out / name)
        files.append(name)
        info[name] = {"t_prime": tp, "tau_max": r.tau_max, "residual": r.residual}
    return info


def spectrum(cfg: dict, out, *, workers: int = 1, seed=None) -> dict:
    if "spectrum" not in cfg["observables"]:
        raise ConfigError("the spectrum verb needs an observables.spectrum section", "observables/spectrum")
    return run(cfg, out, workers=workers, seed=seed)


def _scan_point(args):
    cfg, point, coords, base_seed = args
    seed = point_seed(base_seed, coords)
    pcfg = C.validate(C.apply_point(cfg, point))
    geometry = C.build_geometry(pcfg)
    n = geometry.n_atoms
    model = C.build_model(pcfg, geometry)
    row = dict(point)
    row["seed"] = seed
    if model.is_driven:
        prep, _ = _prepare(pcfg, model)
        row.update(prep)
        return row
    backend = select_backend(pcfg, n)
    _check_capacity(backend, n)
    states = initial_states(pcfg, geometry, seed)
    series, _ = _simulate(pcfg, model, states, backend, seed)
    _, agg = _summaries(series, states, pcfg["observables"]["threshold"], n)
    row["backend"] = backend
    row.update(agg)
    return row


def scan(cfg: dict, out, *, workers: int = 1, seed=None) -> dict:
    """Evaluate summary metrics on the grid spanned by ``scan.axes``."""
    if "scan" not in cfg:
        raise ConfigError("the scan verb needs a scan section", "scan")
    started = _time.perf_counter()
    seed = cfg["solver"]["seed"] if seed is None else int(seed)
    out = _outdir(out)
    axes = cfg["scan"]["axes"]
    names = [a["parameter"] for a in axes]
    grid = list(itertools.product(*[list(enumerate(a["values"])) for a in axes]))
    jobs = [(cfg, {nm: v for nm, (_, v) in zip(names, pt)}, tuple(i for i, _ in pt), seed) for pt in grid]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_scan_point, jobs))
    else:
        rows = [_scan_point(j) for j in jobs]
    columns = list(names)
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)
    _write_rows(out / "scan.csv", columns, [[r.get(c, "") for c in columns] for r in rows])
    meta = _base_metadata(cfg, seed, cfg["solver"]["backend"])
    meta.update({"files": ["scan.csv"], "points": len(rows), "axes": names, "mode": cfg["scan"]["mode"],
                 "wall_time": _time.perf_counter() - started})
    _write_metadata(out, meta)
    return {"rows": rows, **meta}


def read_scan(path) -> list:
    """Rows of a ``scan.csv`` with numeric fields converted."""
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            try:
                conv[k] = float(v)
            except ValueError:
                conv[k] = {"True": True, "False": False}.get(v, v)
        out.append(conv)
    return out
