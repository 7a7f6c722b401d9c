"""Experiment configuration: JSON schema, defaults and model construction.

A config has five sections; only ``geometry`` is required::

    {
      "geometry":    {"dimensionality": 1, "counts": [10], "lattice_constant": 0.15},
      "state":       {"kind": "checkerboard"},
      "solver":      {"backend": "auto", "t_max": 20, "dt": 0.05},
      "observables": {"threshold": 0.1},
      "scan":        {"axes": [{"parameter": "lattice_constant", "values": [0.1, 0.15, 0.2]}]}
    }

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import numpy as np

from ..coupling import build_lattice, coupling_matrices
from ..errors import ConfigError, SubradianceError
from ..lindblad import DEFAULT_ATOL, DEFAULT_RTOL, SystemModel

SCAN_PARAMETERS = ("n_exc", "n_atoms", "lattice_constant", "rabi", "detuning", "delta_12", "delta_32")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_times = {"type": "array", "items": {"type": "number", "minimum": 0}}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["geometry"],
    "properties": {
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "required": ["counts", "lattice_constant"],
            "properties": {
                "dimensionality": {"enum": [1, 2]},
                "counts": {"oneOf": [{"type": "integer", "minimum": 1},
                                     {"type": "array", "items": {"type": "integer", "minimum": 1},
                                      "minItems": 1, "maxItems": 2}]},
                "lattice_constant": _num,
                "dipole": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                "detunings": {"type": "array", "items": _num},
                "checkerboard_detuning": _num,
                "rabi": _num,
                "coherent_interactions": {"type": "boolean"},
            },
        },
        "state": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["checkerboard", "excited", "random", "coherent", "ground", "inverted"]},
                "indices": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "n_exc": {"type": "number", "minimum": 0, "maximum": 1},
                "sets": {"type": "integer", "minimum": 1},
                "parity": {"enum": [0, 1]},
                "k": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backend": {"enum": ["auto", "master", "mcwf", "cumulant"]},
                "t_max": _pos,
                "dt": _pos,
                "rtol": _pos,
                "atol": _pos,
                "method": {"enum": ["RK45", "DOP853", "fixed"]},
                "fixed_step": _pos,
                "snapshot_times": _times,
                "trajectories": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "bisection_tol": _pos,
                "jump_log": {"type": "boolean"},
            },
        },
        "observables": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threshold": _pos,
                "correlation_times": _times,
                "overlaps": {"type": "boolean"},
                "fit_window": {"type": "array", "items": {"type": "number", "minimum": 0},
                               "minItems": 2, "maxItems": 2},
                "fidelity": {"type": "boolean"},
                "spectrum": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["t_prime"],
                    "properties": {
                        "t_prime": _times,
                        "omega_min": _num,
                        "omega_max": _num,
                        "n_omega": {"type": "integer", "minimum": 2},
                        "tau_max": _pos,
                        "dtau": _pos,
                        "per_atom": {"type": "boolean"},
                        "damping": {"type": "number", "minimum": 0},
                        "block_floor": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "scan": {
            "type": "object",
            "additionalProperties": False,
            "required": ["axes"],
            "properties": {
                "mode": {"enum": ["decay", "prep"]},
                "axes": {
                    "type": "array", "minItems": 1, "maxItems": 2,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["parameter", "values"],
                        "properties": {
                            "parameter": {"enum": list(SCAN_PARAMETERS)},
                            "values": {"type": "array", "items": _num, "minItems": 1},
                        },
                    },
                },
            },
        },
    },
}

DEFAULTS = {
    "geometry": {"dimensionality": 1, "dipole": [0.0, 0.0, 1.0], "rabi": 0.0, "coherent_interactions": True},
    "state": {"kind": "checkerboard", "parity": 0, "sets": 50},
    "solver": {"backend": "auto", "t_max": 20.0, "dt": 0.05, "rtol": DEFAULT_RTOL, "atol": DEFAULT_ATOL,
               "method": "RK45", "snapshot_times": [], "trajectories": 2000, "seed": 0,
               "bisection_tol": 1e-10, "jump_log": False},
    "observables": {"threshold": 0.1, "correlation_times": [], "overlaps": False, "fidelity": False},
    "spectrum": {"omega_min": -5.0, "omega_max": 5.0, "n_omega": 1001, "tau_max": 200.0, "dtau": 0.05,
                 "per_atom": False, "damping": 0.0, "block_floor": 1e-12},
}


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts += extra[:1]
    return "/".join(parts) or "<root>"


def validate(raw: dict) -> dict:
    """Schema and consistency checks; returns a copy with defaults filled in."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", "<root>")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _path(err))
    cfg = copy.deepcopy(raw)
    for section in ("geometry", "state", "solver", "observables"):
        merged = dict(DEFAULTS[section])
        merged.update(cfg.get(section, {}))
        cfg[section] = merged
    if "spectrum" in cfg["observables"]:
        merged = dict(DEFAULTS["spectrum"])
        merged.update(cfg["observables"]["spectrum"])
        cfg["observables"]["spectrum"] = merged
    if "scan" in cfg:
        cfg["scan"].setdefault("mode", "decay")
    _check_consistency(cfg)
    return cfg


def _counts(geom) -> list:
    c = geom["counts"]
    return [c] if isinstance(c, int) else list(c)


def n_atoms(cfg) -> int:
    return int(np.prod(_counts(cfg["geometry"])))


def _check_consistency(cfg):
    geom, state, solver, obs = cfg["geometry"], cfg["state"], cfg["solver"], cfg["observables"]
    counts = _counts(geom)
    if len(counts) != geom["dimensionality"]:
        raise ConfigError(f"{geom['dimensionality']}-D lattice needs {geom['dimensionality']} counts",
                          "geometry/counts")
    if geom["lattice_constant"] <= 0:
        raise ConfigError("lattice constant must be positive", "geometry/lattice_constant")
    if "detunings" in geom and "checkerboard_detuning" in geom:
        raise ConfigError("give either detunings or checkerboard_detuning", "geometry/checkerboard_detuning")
    n = int(np.prod(counts))
    if "detunings" in geom and len(geom["detunings"]) != n:
        raise ConfigError(f"expected {n} detunings, got {len(geom['detunings'])}", "geometry/detunings")
    kind = state["kind"]
    if kind == "excited" and "indices" not in state:
        raise ConfigError("state kind 'excited' needs indices", "state/indices")
    if kind == "excited" and any(i >= n for i in state["indices"]):
        raise ConfigError(f"excitation index out of range for {n} atoms", "state/indices")
    if kind in ("random", "coherent") and "n_exc" not in state:
        raise ConfigError(f"state kind '{kind}' needs n_exc", "state/n_exc")
    if solver["method"] == "fixed" and "fixed_step" not in solver:
        raise ConfigError("fixed-step integration needs solver.fixed_step", "solver/fixed_step")
    t_max = solver["t_max"]
    for key, times in (("solver/snapshot_times", solver["snapshot_times"]),
                       ("observables/correlation_times", obs["correlation_times"])):
        if any(t > t_max for t in times):
            raise ConfigError("requested time beyond t_max", key)
    if "spectrum" in obs:
        sp = obs["spectrum"]
        if any(t > t_max for t in sp["t_prime"]):
            raise ConfigError("spectrum start time beyond t_max", "observables/spectrum/t_prime")
        if sp["omega_max"] <= sp["omega_min"]:
            raise ConfigError("empty frequency window", "observables/spectrum/omega_max")
    if "fit_window" in obs and not obs["fit_window"][0] < obs["fit_window"][1] <= t_max:
        raise ConfigError("fit window must be increasing and end before t_max", "observables/fit_window")
    if obs["fidelity"] and geom["rabi"] == 0 and "scan" not in cfg:
        raise ConfigError("fidelity is evaluated for driven preparation runs", "observables/fidelity")
    backend = solver["backend"]
    needs_master = "spectrum" in obs or obs["overlaps"] or obs["fidelity"] or geom["rabi"] != 0
    if backend in ("cumulant", "mcwf") and needs_master:
        raise ConfigError(f"spectra, overlaps, fidelity and driven runs need the master backend, not {backend}",
                          "solver/backend")
    if backend == "cumulant" and kind == "coherent":
        raise ConfigError("the cumulant backend only accepts incoherent initial states", "state/kind")
    if "scan" in cfg:
        _check_scan(cfg)


def _check_scan(cfg):
    axes = cfg["scan"]["axes"]
    names = [a["parameter"] for a in axes]
    if len(set(names)) != len(names):
        raise ConfigError(f"parameter {names[0]!r} swept twice", "scan/axes")
    s = set(names)
    if "detuning" in s and s & {"delta_12", "delta_32"}:
        raise ConfigError("checkerboard detuning and detuning differences cannot be swept together", "scan/axes")
    if s & {"detuning", "delta_12", "delta_32"} and "detunings" in cfg["geometry"]:
        raise ConfigError("swept detunings conflict with geometry.detunings", "geometry/detunings")
    if s & {"delta_12", "delta_32"} and (n_atoms(cfg) != 3 or "n_atoms" in s):
        raise ConfigError("detuning differences are defined for a three-atom chain", "scan/axes")
    if "n_atoms" in s and cfg["geometry"]["dimensionality"] != 1:
        raise ConfigError("atom-number sweeps are defined for chains", "scan/axes")
    if "n_exc" in s and cfg["state"]["kind"] not in ("random", "coherent"):
        raise ConfigError("n_exc sweeps need a random or coherent state", "state/kind")
    if cfg["scan"]["mode"] == "prep" and "rabi" not in s and cfg["geometry"]["rabi"] == 0:
        raise ConfigError("preparation scans need a drive", "geometry/rabi")
    for i, ax in enumerate(axes):
        p, vals = ax["parameter"], ax["values"]
        if p == "lattice_constant" and min(vals) <= 0:
            raise ConfigError("lattice constants must be positive", f"scan/axes/{i}/values")
        if p == "n_exc" and not all(0 <= v <= 1 for v in vals):
            raise ConfigError("n_exc values must lie in [0, 1]", f"scan/axes/{i}/values")
        if p == "n_atoms" and not all(float(v).is_integer() and v >= 1 for v in vals):
            raise ConfigError("atom numbers must be positive integers", f"scan/axes/{i}/values")


def load(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})", str(path)) from None
    return validate(raw)


def apply_point(cfg: dict, point: dict) -> dict:
    """Config with scan parameters substituted (``point`` maps name -> value)."""
    out = copy.deepcopy(cfg)
    out.pop("scan", None)
    geom, state = out["geometry"], out["state"]
    for name, value in point.items():
        if name == "n_exc":
            state["n_exc"] = float(value)
        elif name == "n_atoms":
            geom["counts"] = [int(value)]
        elif name == "lattice_constant":
            geom["lattice_constant"] = float(value)
        elif name == "rabi":
            geom["rabi"] = float(value)
        elif name == "detuning":
            geom["checkerboard_detuning"] = float(value)
    if "delta_12" in point or "delta_32" in point:
        geom["detunings"] = [float(point.get("delta_12", 0.0)), 0.0, float(point.get("delta_32", 0.0))]
    return out


def build_geometry(cfg):
    geom = cfg["geometry"]
    try:
        return build_lattice(geom["dimensionality"], _counts(geom), geom["lattice_constant"], geom["dipole"])
    except SubradianceError as exc:
        raise ConfigError(str(exc), "geometry") from None


def build_model(cfg, geometry=None) -> SystemModel:
    geom = cfg["geometry"]
    geometry = geometry or build_geometry(cfg)
    n = geometry.n_atoms
    if "detunings" in geom:
        det = np.asarray(geom["detunings"], dtype=float)
    elif "checkerboard_detuning" in geom:
        # atoms that should stay in the ground state are pushed off resonance
        parity = cfg["state"]["parity"]
        det = np.where(geometry.site_parity() == parity, 0.0, geom["checkerboard_detuning"])
    else:
        det = np.zeros(n)
    return SystemModel(coupling_matrices(geometry), detunings=det, rabi=geom["rabi"],
                       coherent_interactions=geom["coherent_interactions"])
