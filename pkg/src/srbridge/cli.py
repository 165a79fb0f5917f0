"""Command-line driver: ``srbridge {kernel,solve,simulate,diagnose,distance}``.

Every verb reads one JSON config, writes a resolved copy next to its
outputs, and maps failures onto exit codes (1 config, 2 quadrature,
3 convergence, 4 missing artifact).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, _backend
from . import config as config_mod
from .bridge import load_bridge, reconstruct
from .discretization import (Grid3D, ScalarField, TableSet, gaussian_density, ring_density,
                             save_field_bundle)
from .distance import discrete_ot_oracle, sr_distance_sq
from .errors import ConfigError, ConvergenceError, MissingArtifactError, SRBridgeError
from .geometry import GroupPoint, make_frame
from .heat_kernel import QuadratureSpec, kernel_origin, tabulate, varadhan_rate
from .report import write_json
from .schrodinger import SinkhornConfig, solve_schrodinger
from .sde import (SimConfig, histogram_on_grid, pathwise_cost, pathwise_cost_sem, self_sampling_error,
                  simulate, terminal_marginal_error)

log = logging.getLogger("srbridge")

VERBS = ("kernel", "solve", "simulate", "diagnose", "distance")


class _Collector(logging.Handler):
    """Keeps warning messages for the run report."""

    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


# ---------------------------------------------------------------------------
# config helpers
# ---------------------------------------------------------------------------

def build_grid(cfg: dict) -> Grid3D:
    g = cfg["grid"]
    try:
        return Grid3D.from_bounds(g["lower"], g["upper"], g["dims"], point_cap=g["point_cap"])
    except ValueError as exc:
        raise ConfigError(f"invalid config: 'grid': {exc}") from exc


def build_quad(cfg: dict) -> QuadratureSpec:
    q = {k: v for k, v in cfg["quadrature"].items() if k != "n_z"}
    return QuadratureSpec(**q)


def build_densities(cfg: dict, grid: Grid3D) -> tuple[ScalarField, ScalarField]:
    ga, ri = cfg["gaussian"], cfg["ring"]
    rho_0 = gaussian_density(grid, ga["mean"], ga["sigmas"])
    rho_f = ring_density(grid, ri["R0"], ri["sR"], ri["mz"], ri["sigma_z"])
    return rho_0, rho_f


def sinkhorn_config(cfg: dict, schedule=None) -> SinkhornConfig:
    s = dict(cfg["sinkhorn"])
    return SinkhornConfig(epsilon_schedule=tuple(schedule or cfg["epsilon_schedule"]), **s)


def eps_tag(eps: float) -> str:
    return f"eps_{eps:g}"


def bridge_times(cfg: dict) -> np.ndarray:
    n = cfg["bridge"]["n_times"]
    return cfg["t_f"] * np.arange(n) / (n - 1)


def table_sets(cfg: dict, grid: Grid3D, schedule) -> dict:
    quad = build_quad(cfg)
    return {eps: TableSet(grid, eps, cfg["alpha"], quad, cfg["quadrature"]["n_z"],
                          cfg["kernel_convention"], cfg["t_f"]) for eps in schedule}


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_kernel(cfg: dict, args) -> dict:
    """Evaluate the kernel at the configured points and optionally tabulate it."""
    k = cfg["kernel"]
    quad = build_quad(cfg)
    points = [args.point] if args.point else k["points"]
    rows = []
    for p in points:
        q = GroupPoint(*map(float, p))
        val = kernel_origin(q, k["t"], k["epsilon"], cfg["alpha"], quad, cfg["kernel_convention"])
        rows.append({"point": [q.x, q.y, q.z], "value": val})
        print(f"p({q.x!r}, {q.y!r}, {q.z!r}) = {val!r}")
    out = {"t": k["t"], "epsilon": k["epsilon"], "alpha": cfg["alpha"],
           "convention": cfg["kernel_convention"], "values": rows}
    directory = os.path.join(cfg["out"], "kernel")
    if k["tabulate"]:
        tab = tabulate(k["t"], k["epsilon"], cfg["alpha"], k["rho_max"], k["z_max"], k["n_rho"],
                       k["n_z"], quad, convention=cfg["kernel_convention"])
        tab.save(os.path.join(directory, "table"))
        out["table"] = {"renorm": tab.renorm, "mass": tab.mass, "table_mass": tab.table_mass}
    write_json(os.path.join(directory, "values.json"), out)
    return out


def _save_potentials(directory: str, pot) -> None:
    save_field_bundle(os.path.join(directory, "log_phi_f"), pot.phi_f, "log_phi_f",
                      data=pot.phi_f.log_values)
    save_field_bundle(os.path.join(directory, "log_phihat_0"), pot.phihat_0, "log_phihat_0",
                      data=pot.phihat_0.log_values)
    write_json(os.path.join(directory, "convergence.json"), pot.summary())


def cmd_solve(cfg: dict, args) -> dict:
    """Annealed Sinkhorn over the schedule, then one bridge per noise level."""
    grid = build_grid(cfg)
    rho_0, rho_f = build_densities(cfg, grid)
    schedule = cfg["epsilon_schedule"]
    scfg = sinkhorn_config(cfg)
    sets = table_sets(cfg, grid, schedule)
    tables = [sets[e](cfg["t_f"]) for e in schedule]
    report: dict = {"version": __version__, "seed": cfg["seed"], "levels": []}
    frame = make_frame("heisenberg", cfg["alpha"])
    failure = None
    try:
        pots = solve_schrodinger(rho_0, rho_f, scfg, tables)
    except ConvergenceError as exc:
        pots = [p for p in (exc.completed or []) if p.converged]
        failure = exc
        log.warning("%s; keeping %d converged level(s)", exc, len(pots))
    for pot, tab in zip(pots, tables):
        eps = pot.epsilon
        _save_potentials(os.path.join(cfg["out"], "potentials", eps_tag(eps)), pot)
        level = {"epsilon": eps, "sinkhorn": pot.summary(), "renorm": tab.renorm}
        try:
            br = reconstruct(pot, rho_0, rho_f, sets[eps], times=bridge_times(cfg), frame=frame)
        except ConvergenceError as exc:
            log.warning("bridge at eps=%g: %s", eps, exc)
            failure = failure or exc
            report["levels"].append(level)
            continue
        br.save(os.path.join(cfg["out"], "bridges", eps_tag(eps)))
        level.update(cost=br.cost, kl_static=br.kl_static, eps_kl=eps * br.kl_static,
                     endpoint_l1=list(br.endpoint_l1),
                     max_interior_mass_drift=float(np.max(np.abs(br.mass_drift[1:-1])))
                     if br.times.size > 2 else 0.0)
        report["levels"].append(level)
    if len(schedule) > 1:
        report["warm_start"] = {"enabled": scfg.warm_start, "mode": scfg.warm_start_mode}
    if failure is not None:
        report["failure"] = str(failure)
        args._failure = failure
    return report


def cmd_simulate(cfg: dict, args) -> dict:
    """Controlled (or free) ensemble, 50-path CSV, terminal histogram and metrics."""
    s = cfg["sim"]
    grid = build_grid(cfg)
    rho_0, rho_f = build_densities(cfg, grid)
    frame = make_frame(s["frame"], cfg["alpha"])
    bridge = None
    if s["controlled"]:
        if s["frame"] != "heisenberg":
            raise ConfigError("invalid config: 'sim/frame': controlled runs need the heisenberg frame")
        bridge = load_bridge(os.path.join(cfg["out"], "bridges", eps_tag(s["epsilon"])), frame)
    if isinstance(s["initial"], str):
        initial = rho_0 if s["initial"] == "gaussian" else rho_f
    else:
        initial = np.asarray(s["initial"], dtype=float)
    sim = SimConfig(n_particles=s["n_particles"], dt=cfg["t_f"] / s["n_steps"], t_f=cfg["t_f"],
                    epsilon=s["epsilon"], seed=cfg["seed"], frame=frame, control=bridge,
                    record_paths=s["record_paths"], box=(grid.origin, tuple(grid.upper)),
                    max_exit_fraction=s["max_exit_fraction"])
    ens = simulate(sim, initial)
    directory = os.path.join(cfg["out"], "simulate")
    ens.to_csv(os.path.join(directory, "trajectories.csv"))
    counts, n_in = histogram_on_grid(ens.terminal[~ens.exited], grid)
    hist = ScalarField(grid, counts / max(n_in, 1) / grid.cell_weight, kind="density",
                       name="terminal_histogram")
    save_field_bundle(os.path.join(directory, "terminal_histogram"), hist, "terminal_histogram",
                      time=cfg["t_f"])
    metrics = ens.metrics()
    metrics["terminal_marginal_error"] = terminal_marginal_error(ens, rho_f)
    metrics["noise_floor"] = self_sampling_error(rho_f, s["n_particles"],
                                                 cfg["seed"] + s["noise_floor_seed_offset"])
    if bridge is not None:
        metrics["pathwise_cost"] = pathwise_cost(ens, bridge)
        metrics["pathwise_cost_sem"] = pathwise_cost_sem(ens)
        metrics["eulerian_cost"] = bridge.cost
    write_json(os.path.join(directory, "metrics.json"), metrics)
    return metrics


def cmd_diagnose(cfg: dict, args) -> dict:
    """Varadhan table and discrete-OT oracle, merged into the solve report."""
    path = os.path.join(cfg["out"], "report.json")
    if not os.path.isfile(path):
        raise MissingArtifactError(f"no solve report at {path}; run 'solve' first")
    with open(path) as fh:
        report = json.load(fh)
    d = cfg["diagnose"]
    quad = build_quad(cfg)
    alpha = cfg["alpha"]
    rows = []
    for p in d["probes"]:
        q = GroupPoint(*map(float, p))
        d2 = sr_distance_sq(GroupPoint(0.0, 0.0, 0.0), q, alpha, cfg["distance_convention"])
        errs = []
        for eps in d["varadhan_epsilons"]:
            rate = varadhan_rate(q, d["varadhan_t"], eps, alpha, quad, cfg["kernel_convention"])
            errs.append(abs(rate - d2) / d2)
        rows.append({"probe": [q.x, q.y, q.z], "d2": d2, "rel_errors": errs,
                     "monotone": bool(np.all(np.diff(errs) < 0))})
    grid = build_grid(cfg)
    rho_0, rho_f = build_densities(cfg, grid)
    oracle = discrete_ot_oracle(rho_0, rho_f, d["oracle_n_support"], alpha,
                                cfg["distance_convention"])
    costs = [(lv["epsilon"], lv["cost"]) for lv in report.get("levels", []) if "cost" in lv]
    diag = {"varadhan": {"epsilons": d["varadhan_epsilons"], "t": d["varadhan_t"], "rows": rows},
            "oracle": {"value": oracle, "n_support": d["oracle_n_support"],
                       "costs": [{"epsilon": e, "cost": c, "rel_gap": abs(c - oracle) / oracle}
                                 for e, c in costs]}}
    report["diagnostics"] = diag
    return report


def cmd_distance(cfg: dict, args) -> dict:
    d = cfg["distance"]
    q1 = GroupPoint(*map(float, args.from_point or d["from"]))
    q2 = GroupPoint(*map(float, args.to_point or d["to"]))
    d2 = sr_distance_sq(q1, q2, cfg["alpha"], cfg["distance_convention"])
    print(repr(d2))
    return {"from": [q1.x, q1.y, q1.z], "to": [q2.x, q2.y, q2.z], "d2": d2,
            "alpha": cfg["alpha"], "convention": cfg["distance_convention"]}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    # shared flags are accepted before or after the verb; SUPPRESS keeps a
    # subparser from clobbering a value given at the top level
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                        help="JSON run config")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS,
                        help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, metavar="N", default=argparse.SUPPRESS,
                        help="run seed (overrides the config)")
    common.add_argument("--threads", type=int, metavar="N", default=argparse.SUPPRESS,
                        help="threads for compiled kernels, 0 = all cores (default)")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="srbridge", parents=[common],
                                     description="Schrodinger bridges on the Heisenberg group")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)
    k = sub.add_parser("kernel", parents=[common], help="evaluate or tabulate the heat kernel")
    k.add_argument("--point", type=float, nargs=3, metavar=("X", "Y", "Z"))
    sub.add_parser("solve", parents=[common], help="Sinkhorn schedule and bridge fields")
    sub.add_parser("simulate", parents=[common], help="SDE ensemble under a solved bridge")
    sub.add_parser("diagnose", parents=[common], help="Varadhan table and OT oracle")
    dd = sub.add_parser("distance", parents=[common], help="squared sub-Riemannian distance")
    dd.add_argument("--from", dest="from_point", type=float, nargs=3, metavar=("X", "Y", "Z"))
    dd.add_argument("--to", dest="to_point", type=float, nargs=3, metavar=("X", "Y", "Z"))
    return parser


_COMMANDS = {"kernel": cmd_kernel, "solve": cmd_solve, "simulate": cmd_simulate,
             "diagnose": cmd_diagnose, "distance": cmd_distance}

_FLAG_DEFAULTS = {"config": None, "out": None, "seed": None, "threads": 0, "verbose": 0}

_REPORTS = {"solve": "report.json", "diagnose": "report.json", "distance": "distance.json"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in _FLAG_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    collector = _Collector()
    logging.getLogger().addHandler(collector)
    try:
        if args.threads < 0:
            raise ConfigError("invalid option: --threads must be >= 0")
        _backend.set_threads(args.threads)
        cfg = config_mod.load(args.config, out=args.out, seed=args.seed)
        config_mod.write_snapshot(cfg, cfg["out"])
        args._failure = None
        result = _COMMANDS[args.verb](cfg, args)
        if args.verb in _REPORTS:
            if args.verb == "solve":
                result["warnings"] = list(collector.messages)
            write_json(os.path.join(cfg["out"], _REPORTS[args.verb]), result)
        if args._failure is not None:
            raise args._failure
    except SRBridgeError as exc:
        print(f"srbridge {args.verb}: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        logging.getLogger().removeHandler(collector)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
