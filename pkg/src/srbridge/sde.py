"""Euler-Maruyama ensembles of the horizontal diffusion.

Each particle draws from its own counter-based stream: the Philox counter
is ``(particle id, step, block)`` under the run seed, so an ensemble does
not depend on how particles are batched or threaded.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .discretization import Grid3D, ScalarField
from .errors import BoxExitError
from .geometry import GroupPoint, HorizontalFrame, frame_arrays, make_frame

# counter word reserved for initial sampling (time steps use 0, 1, 2, ...)
INIT_WORD = 0xFFFFFFFF


@dataclass
class SimConfig:
    """Ensemble settings.

    Parameters
    ----------
    n_particles : int
        Ensemble size.
    dt : float, optional
        Step; defaults to ``t_f / 400`` and must divide ``t_f``.
    epsilon : float
        Noise level (``0`` gives deterministic paths).
    seed : int
        64-bit run seed.
    frame : HorizontalFrame
        Diffusion frame.
    control : BridgeSolution, optional
        Feedback control; absent means uncontrolled.
    box : (lower, upper), optional
        Exit box; defaults to the control grid.  Without a box nothing exits.
    """

    n_particles: int = 100_000
    dt: float | None = None
    t_f: float = 1.0
    epsilon: float = 1.0
    seed: int = 0
    frame: HorizontalFrame = field(default_factory=make_frame)
    control: object = None
    record_paths: int = 50
    record_every: int = 1
    box: tuple | None = None
    max_exit_fraction: float = 0.01
    batch: int = 250_000

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.t_f <= 0:
            raise ValueError("t_f must be positive")
        if self.dt is None:
            self.dt = self.t_f / 400.0
        n = self.t_f / self.dt
        if self.dt <= 0 or abs(n - round(n)) > 1e-12 * max(1.0, n):
            raise ValueError("dt must divide t_f")
        if self.control is not None:
            if abs(self.control.epsilon - self.epsilon) > 1e-12 * max(self.epsilon, 1e-300):
                raise ValueError("control noise level does not match the ensemble")
            if self.box is None:
                g = self.control.grid
                self.box = (tuple(g.origin), tuple(g.upper))

    @property
    def n_steps(self) -> int:
        return int(round(self.t_f / self.dt))


@dataclass
class TrajectoryEnsemble:
    """Terminal states of every particle plus full paths of a recorded subset."""

    times: np.ndarray
    paths: np.ndarray
    path_ids: np.ndarray
    terminal: np.ndarray
    initial: np.ndarray
    path_cost: np.ndarray
    exited: np.ndarray
    seed: int
    epsilon: float
    z_mean: np.ndarray
    z_sem: np.ndarray
    max_horizontal_residual: float
    controlled: bool

    @property
    def n_particles(self) -> int:
        return self.terminal.shape[0]

    @property
    def exit_fraction(self) -> float:
        return float(np.mean(self.exited))

    def to_csv(self, path: str) -> None:
        """Recorded paths as ``t,particle,x,y,z`` rows."""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write("t,particle,x,y,z\n")
            for k, pid in enumerate(self.path_ids):
                for j, t in enumerate(self.times):
                    x, y, z = (float(v) for v in self.paths[k, j])
                    fh.write(f"{float(t)!r},{int(pid)},{x!r},{y!r},{z!r}\n")

    def metrics(self) -> dict:
        return {"n_particles": self.n_particles, "seed": self.seed, "epsilon": self.epsilon,
                "exit_fraction": self.exit_fraction, "controlled": self.controlled,
                "max_horizontal_residual": self.max_horizontal_residual,
                "mean_path_cost": float(np.mean(self.path_cost))}


# ---------------------------------------------------------------------------
# sampling and interpolation
# ---------------------------------------------------------------------------

def sample_density(density: ScalarField, n: int, seed: int, ids=None) -> np.ndarray:
    """Inverse-CDF draw over flattened cells, uniform jitter inside the cell."""
    grid = density.grid
    ids = np.arange(n, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
    uni = _backend.get("philox_uniforms")
    u_cell, u_x = uni(seed, ids, INIT_WORD, 0)
    u_y, u_z = uni(seed, ids, INIT_WORD, 1)
    cdf = np.cumsum(density.values)
    idx = np.searchsorted(cdf, u_cell * cdf[-1], side="right")
    idx = np.minimum(idx, grid.size - 1)
    nodes = grid.points()[idx]
    jitter = (np.stack([u_x, u_y, u_z], axis=1) - 0.5) * np.asarray(grid.spacing)
    return nodes + jitter


def trilinear(grid: Grid3D, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of node values ``(N, m)`` at ``pts``, clamped to the box."""
    dims = np.asarray(grid.dims)
    vals = np.asarray(values).reshape(tuple(dims) + (-1,))
    s = (pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    s = np.clip(s, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(s).astype(np.intp), dims - 2)
    fr = s - i0
    out = np.zeros((pts.shape[0], vals.shape[-1]))
    for dx in (0, 1):
        wx = fr[:, 0] if dx else 1.0 - fr[:, 0]
        for dy in (0, 1):
            wy = fr[:, 1] if dy else 1.0 - fr[:, 1]
            for dz in (0, 1):
                wz = fr[:, 2] if dz else 1.0 - fr[:, 2]
                out += (wx * wy * wz)[:, None] * vals[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


def horizontal_residual(G: np.ndarray, inc: np.ndarray) -> np.ndarray:
    """Component of ``inc`` along the normal of a rank-2 frame ``(n, 3, 2)``.

    For frames whose top block is the identity the normal is
    ``(-g31, -g32, 1)``; the residual of an increment ``G v`` is then zero
    in floating point, not just up to rounding.
    """
    return (-G[:, 2, 0] * inc[:, 0] + -G[:, 2, 1] * inc[:, 1]) + inc[:, 2]


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _third_row(frame: HorizontalFrame, X: np.ndarray):
    if frame.kind == "heisenberg":
        a2 = 2.0 * frame.alpha
        return -a2 * X[:, 1], a2 * X[:, 0]
    zero = np.zeros(X.shape[0])
    return zero, zero


def _initial_states(initial, n, seed, ids) -> np.ndarray:
    if isinstance(initial, ScalarField):
        return sample_density(initial, n, seed, ids)
    if isinstance(initial, GroupPoint):
        initial = initial.as_array()
    x0 = np.asarray(initial, dtype=float)
    if x0.shape == (3,):
        return np.broadcast_to(x0, (ids.shape[0], 3)).copy()
    if x0.shape == (n, 3):
        return x0[ids.astype(np.intp)].copy()
    raise ValueError("initial must be a density, a point or an (n, 3) array")


def simulate(config: SimConfig, initial) -> TrajectoryEnsemble:
    """Euler-Maruyama ensemble ``X += (b + g u) dt + sqrt(eps) g dW``.

    Raises
    ------
    BoxExitError
        When more than ``max_exit_fraction`` of particles leave the box.
    """
    cfg = config
    n = cfg.n_particles
    frame = cfg.frame
    m = frame.m
    steps = cfg.n_steps
    dt = cfg.dt
    sq = np.sqrt(cfg.epsilon * dt)
    bridge = cfg.control
    normals = _backend.get("philox_normals")
    threads = _backend.threads()
    n_rec = min(cfg.record_paths, n)
    rec_steps = np.arange(0, steps + 1, cfg.record_every)
    if rec_steps[-1] != steps:
        rec_steps = np.append(rec_steps, steps)
    paths = np.empty((n_rec, rec_steps.size, 3))
    terminal = np.empty((n, 3))
    initial_all = np.empty((n, 3))
    cost = np.zeros(n)
    exited = np.zeros(n, dtype=bool)
    z_sum = np.zeros(steps + 1)
    z_sq = np.zeros(steps + 1)
    max_res = 0.0
    lo = hi = None
    if cfg.box is not None:
        lo, hi = np.asarray(cfg.box[0], dtype=float), np.asarray(cfg.box[1], dtype=float)
    for start in range(0, n, cfg.batch):
        ids = np.arange(start, min(n, start + cfg.batch), dtype=np.uint64)
        X = _initial_states(initial, n, cfg.seed, ids)
        initial_all[ids] = X
        out = np.zeros(ids.shape[0], dtype=bool)
        rec_mask = ids < n_rec
        r = 0
        for k in range(steps + 1):
            z_sum[k] += np.sum(X[:, 2])
            z_sq[k] += np.sum(X[:, 2] ** 2)
            if r < rec_steps.size and rec_steps[r] == k:
                if np.any(rec_mask):
                    paths[ids[rec_mask].astype(np.intp), r] = X[rec_mask]
                r += 1
            if k == steps:
                break
            v = sq * normals(cfg.seed, ids, k, m, threads) if cfg.epsilon > 0 else np.zeros(
                (ids.shape[0], m))
            if bridge is not None:
                u = trilinear(bridge.grid, bridge.control_at(k * dt), X)
                cost[ids] += 0.5 * np.sum(u ** 2, axis=1) * dt
                v += u * dt
            if m == 2:
                # rank-2 frames have an identity top block; only the third row varies
                g31, g32 = _third_row(frame, X)
                inc = np.empty_like(X)
                inc[:, :2] = v
                inc[:, 2] = g31 * v[:, 0] + g32 * v[:, 1]
                res = (-g31 * inc[:, 0] + -g32 * inc[:, 1]) + inc[:, 2]
                max_res = max(max_res, float(np.max(np.abs(res))))
            else:
                inc = np.einsum("nim,nm->ni", frame_arrays(frame, X), v)
            # the drift correction vanishes for all supported frames
            X = X + inc
            if lo is not None:
                out |= np.any((X < lo) | (X > hi), axis=1)
        terminal[ids] = X
        exited[ids] = out
    times = rec_steps * dt
    z_mean = z_sum / n
    z_var = np.maximum(z_sq / n - z_mean ** 2, 0.0)
    ens = TrajectoryEnsemble(times=times, paths=paths, path_ids=np.arange(n_rec),
                             terminal=terminal, initial=initial_all, path_cost=cost,
                             exited=exited, seed=int(cfg.seed), epsilon=float(cfg.epsilon),
                             z_mean=z_mean, z_sem=np.sqrt(z_var / n), max_horizontal_residual=max_res,
                             controlled=bridge is not None)
    if lo is not None and ens.exit_fraction > cfg.max_exit_fraction:
        raise BoxExitError(f"{ens.exit_fraction:.2%} of particles left the box")
    return ens


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def histogram_on_grid(states: np.ndarray, grid: Grid3D) -> tuple[np.ndarray, int]:
    """Counts per nearest node (cells centred on nodes) and the number binned."""
    s = np.rint((states - np.asarray(grid.origin)) / np.asarray(grid.spacing)).astype(np.intp)
    dims = np.asarray(grid.dims)
    inside = np.all((s >= 0) & (s < dims), axis=1)
    s = s[inside]
    flat = (s[:, 0] * dims[1] + s[:, 1]) * dims[2] + s[:, 2]
    return np.bincount(flat, minlength=grid.size).astype(float), int(inside.sum())


def histogram_l1(states: np.ndarray, target: ScalarField) -> float:
    """L1 distance between the normalised histogram of ``states`` and ``target``."""
    counts, n_in = histogram_on_grid(states, target.grid)
    w = target.grid.cell_weight
    if n_in == 0:
        return 2.0
    return float(np.sum(np.abs(counts / (n_in * w) - target.values)) * w)


def terminal_marginal_error(ensemble: TrajectoryEnsemble, target: ScalarField) -> float:
    """Terminal-histogram L1 error against ``target`` (exited particles dropped)."""
    keep = ~ensemble.exited
    return histogram_l1(ensemble.terminal[keep], target)


def self_sampling_error(target: ScalarField, n: int, seed: int) -> float:
    """Noise floor: histogram error of ``n`` draws taken from ``target`` itself."""
    return histogram_l1(sample_density(target, n, seed), target)


def pathwise_cost(ensemble: TrajectoryEnsemble, bridge=None) -> float:
    """Monte-Carlo mean of ``sum_k 1/2 |u(t_k, X_k)|^2 dt``."""
    if bridge is not None and abs(bridge.epsilon - ensemble.epsilon) > 1e-12:
        raise ValueError("ensemble was not simulated under this bridge")
    return float(np.mean(ensemble.path_cost))


def pathwise_cost_sem(ensemble: TrajectoryEnsemble) -> float:
    return float(np.std(ensemble.path_cost) / np.sqrt(ensemble.n_particles))


def histogram_vs_kernel(states: np.ndarray, table, lower, upper, bins=10,
                        min_count: int = 1000) -> dict:
    """Binned density of ``states`` against bin averages of a kernel table.

    The table is centred at the origin; each bin average uses a 3-point
    Gauss-Legendre rule per axis on the renormalised kernel.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    bins = np.broadcast_to(np.asarray(bins), (3,))
    edges = [np.linspace(lower[k], upper[k], bins[k] + 1) for k in range(3)]
    counts, _ = np.histogramdd(states, bins=edges)
    widths = (upper - lower) / bins
    vol = float(np.prod(widths))
    n = states.shape[0]
    xg, wg = np.polynomial.legendre.leggauss(3)
    centers = [0.5 * (e[1:] + e[:-1]) for e in edges]
    avg = np.zeros(counts.shape)
    for a, wa in zip(xg, wg):
        for b, wb in zip(xg, wg):
            for c, wc in zip(xg, wg):
                X, Y, Z = np.meshgrid(centers[0] + 0.5 * widths[0] * a,
                                      centers[1] + 0.5 * widths[1] * b,
                                      centers[2] + 0.5 * widths[2] * c, indexing="ij")
                val = table.lookup(np.hypot(X, Y), np.abs(Z))
                avg += wa * wb * wc / 8.0 * val
    mc = counts / (n * vol)
    sel = counts >= min_count
    rel = np.abs(mc[sel] - avg[sel]) / avg[sel]
    return {"bins_used": int(sel.sum()), "max_rel_error": float(rel.max()) if rel.size else
            float("nan"), "mean_rel_error": float(rel.mean()) if rel.size else float("nan"),
            "captured_fraction": float(counts.sum() / n)}
