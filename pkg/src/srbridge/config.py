"""Run configuration: JSON schema, defaults and the resolved snapshot."""

from __future__ import annotations

import copy
import json
import os
from importlib import resources

import jsonschema

from .errors import ConfigError

DEFAULTS: dict = {
    "grid": {"lower": [-4.5, -4.5, -3.0], "upper": [4.5, 4.5, 3.0], "dims": [24, 24, 24],
             "point_cap": 13824},
    "gaussian": {"mean": [0.0, 0.0, 0.0], "sigmas": [0.55, 0.55, 0.55]},
    "ring": {"R0": 2.5, "sR": 0.45, "mz": 0.0, "sigma_z": 0.70},
    "alpha": 0.25,
    "kernel_convention": "levy",
    "distance_convention": "geodesic",
    "t_f": 1.0,
    "epsilon_schedule": [1.0, 0.5, 0.1, 0.01],
    "sinkhorn": {"tol": 1e-8, "max_iters": 5000, "marginal_tol": 1e-6, "warm_start": True,
                 "warm_start_mode": "literal", "method": "auto", "truncation": 40.0,
                 "absorb": 100.0, "sparse_budget": 25000000},
    "quadrature": {"nodes_per_panel": 16, "rel_tol": 1e-10, "tail_tol": 1e-14,
                   "max_panels": 20000, "oscillation_periods": 1.5, "n_z": 256},
    "bridge": {"n_times": 17},
    "sim": {"n_particles": 100000, "n_steps": 400, "epsilon": 0.5, "record_paths": 50,
            "frame": "heisenberg", "controlled": True, "initial": "gaussian",
            "max_exit_fraction": 0.01, "noise_floor_seed_offset": 1},
    "kernel": {"t": 0.5, "epsilon": 1.0, "points": [[1.0, 0.0, 0.0]], "tabulate": False,
               "rho_max": 6.5, "z_max": 4.0, "n_rho": 256, "n_z": 256},
    "diagnose": {"varadhan_epsilons": [0.5, 0.1, 0.02], "varadhan_t": 1.0,
                 "probes": [[1.5, 0.0, 0.0], [0.0, 2.0, 0.0], [1.5, 1.5, 0.0],
                            [-2.5, 0.5, 0.0], [3.0, 0.0, 0.0]],
                 "oracle_n_support": 400},
    "distance": {"from": [0.0, 0.0, 0.0], "to": [1.0, 0.0, 0.0]},
    "out": "runs/default",
    "seed": 0,
}


def load_schema() -> dict:
    with resources.files("srbridge").joinpath("schema/config.schema.json").open() as fh:
        return json.load(fh)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _where(err: jsonschema.ValidationError) -> str:
    path = "/".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        key = ", ".join(repr(k) for k in extra)
        return f"unknown key {key}" + (f" under '{path}'" if path else "")
    return f"'{path or '<root>'}': {err.message}"


def validate(cfg: dict) -> None:
    """Raise :class:`ConfigError` naming the first offending key."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("invalid config: " + _where(errors[0]))
    lo, hi = cfg["grid"]["lower"], cfg["grid"]["upper"]
    if any(a >= b for a, b in zip(lo, hi)):
        raise ConfigError("invalid config: 'grid/upper' must exceed 'grid/lower'")


def resolve(user: dict | None = None, *, out: str | None = None, seed: int | None = None) -> dict:
    """Validate ``user``, fill defaults and apply command-line overrides."""
    user = {} if user is None else user
    if not isinstance(user, dict):
        raise ConfigError("invalid config: top level must be an object")
    validate(_merge(DEFAULTS, user))
    cfg = _merge(DEFAULTS, user)
    if out is not None:
        cfg["out"] = out
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def load(path: str | None, **overrides) -> dict:
    if path is None:
        return resolve(None, **overrides)
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return resolve(user, **overrides)


def write_snapshot(cfg: dict, directory: str) -> str:
    from .report import write_json
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "resolved_config.json")
    write_json(path, cfg)
    return path
