"""Space-time bridge from converged potentials.

With ``phi(t) = Q_{t_f - t} phi_f`` and ``phihat(t) = P_t phihat_0`` the
optimal density is ``rho(t) = phi(t) phihat(t)`` and the feedback control is
``u = eps g^T grad log phi``.  Every semigroup is applied by kernel
quadrature on the grid, one table per propagation gap.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .discretization import DEFAULT_POINT_CAP, Grid3D, ScalarField, TableSet, grid_kernel, save_field_bundle
from .errors import EndpointMismatchError, MissingArtifactError
from .geometry import HorizontalFrame, frame_arrays, make_frame
from .heat_kernel import KernelTable
from .report import write_json
from .schrodinger import Potentials

log = logging.getLogger(__name__)

ENDPOINT_FAIL = 1e-2


def default_times(t_f: float = 1.0, n: int = 17) -> np.ndarray:
    return t_f * np.arange(n) / (n - 1)


@dataclass
class BridgeSolution:
    """Sampled bridge fields for one noise level.

    ``control[j]`` has shape ``(N, m)``; ``mass_raw[j]`` is the mass of
    ``phi phihat`` before the per-time renormalisation.
    """

    epsilon: float
    times: np.ndarray
    log_phi: list
    log_phihat: list
    rho: list
    control: list
    mass_raw: np.ndarray
    endpoint_l1: tuple
    frame: HorizontalFrame
    grid: Grid3D
    cost: float = 0.0
    kl_static: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def t_f(self) -> float:
        return float(self.times[-1])

    def phi(self, j: int) -> ScalarField:
        return ScalarField(self.grid, log_values=self.log_phi[j], kind="potential", name="phi")

    def phihat(self, j: int) -> ScalarField:
        return ScalarField(self.grid, log_values=self.log_phihat[j], kind="potential",
                           name="phihat")

    @property
    def mass_drift(self) -> np.ndarray:
        return self.mass_raw - 1.0

    def control_at(self, t: float) -> np.ndarray:
        """Control samples in force at time ``t`` (piecewise constant)."""
        j = int(np.searchsorted(self.times, t, side="right") - 1)
        return self.control[min(max(j, 0), len(self.times) - 1)]

    def summary(self) -> dict:
        return {"epsilon": self.epsilon, "cost": self.cost, "kl_static": self.kl_static,
                "endpoint_l1": list(self.endpoint_l1),
                "mass_drift": [float(m) for m in self.mass_drift],
                "times": [float(t) for t in self.times], "alpha": self.frame.alpha,
                "frame": self.frame.kind}

    def save(self, directory: str) -> None:
        """One field bundle per (quantity, time) plus ``summary.json``."""
        os.makedirs(directory, exist_ok=True)
        for j, t in enumerate(self.times):
            tag = f"{j:02d}"
            save_field_bundle(os.path.join(directory, f"rho_{tag}"), self.rho[j], "rho", float(t))
            save_field_bundle(os.path.join(directory, f"log_phi_{tag}"), self.phi(j), "log_phi",
                              float(t), data=self.log_phi[j])
            save_field_bundle(os.path.join(directory, f"log_phihat_{tag}"), self.phihat(j),
                              "log_phihat", float(t), data=self.log_phihat[j])
            save_field_bundle(os.path.join(directory, f"control_{tag}"), self.rho[j], "control",
                              float(t), data=self.control[j])
        summary = self.summary()
        summary.update(self.extras)
        write_json(os.path.join(directory, "summary.json"), summary)


def _read_bundle(directory: str) -> tuple[dict, np.ndarray]:
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    data = np.fromfile(os.path.join(directory, "data.f64le"), dtype="<f8")
    if "components" in meta:
        data = data.reshape(-1, meta["components"])
    return meta, data


def load_bridge(directory: str, frame: HorizontalFrame | None = None) -> BridgeSolution:
    """Inverse of :meth:`BridgeSolution.save`.

    Raises
    ------
    MissingArtifactError
        When the summary or any per-time bundle is absent.
    """
    path = os.path.join(directory, "summary.json")
    if not os.path.isfile(path):
        raise MissingArtifactError(f"no bridge summary at {path}")
    with open(path) as fh:
        summary = json.load(fh)
    times = np.asarray(summary["times"], dtype=float)
    fields: dict = {"rho": [], "log_phi": [], "log_phihat": [], "control": []}
    grid = None
    for j in range(times.size):
        for name, out in fields.items():
            sub = os.path.join(directory, f"{name}_{j:02d}")
            if not os.path.isfile(os.path.join(sub, "data.f64le")):
                raise MissingArtifactError(f"missing bridge bundle {sub}")
            meta, data = _read_bundle(sub)
            if grid is None:
                g = meta["grid"]
                grid = Grid3D(g["origin"], g["spacing"], g["dims"],
                              point_cap=max(DEFAULT_POINT_CAP, int(np.prod(g["dims"]))))
            out.append(data)
    rho = [ScalarField(grid, r, kind="density", name="rho") for r in fields["rho"]]
    frame = frame or make_frame("heisenberg", float(summary.get("alpha", 0.25)))
    return BridgeSolution(epsilon=float(summary["epsilon"]), times=times,
                          log_phi=fields["log_phi"], log_phihat=fields["log_phihat"], rho=rho,
                          control=fields["control"],
                          mass_raw=1.0 + np.asarray(summary["mass_drift"], dtype=float),
                          endpoint_l1=tuple(summary["endpoint_l1"]), frame=frame, grid=grid,
                          cost=float(summary["cost"]), kl_static=float(summary["kl_static"]))


def _l1(p: np.ndarray, q: np.ndarray, w: float) -> float:
    return float(np.sum(np.abs(p - q)) * w)


def reconstruct(potentials: Potentials, rho_0: ScalarField, rho_f: ScalarField,
                tables: Callable[[float], KernelTable] | TableSet, times=None,
                frame: HorizontalFrame | None = None, check: bool = True) -> BridgeSolution:
    """Sample the bridge at ``times`` (default 17 uniform samples on ``[0, t_f]``).

    Parameters
    ----------
    tables : callable
        Maps a propagation gap to its kernel table; the horizon table
        ``tables(t_f)`` must be the one used by the Sinkhorn solve.

    Raises
    ------
    EndpointMismatchError
        When an endpoint density misses its target by more than 1e-2 in L1.
    """
    grid = rho_0.grid
    eps = potentials.epsilon
    if times is None:
        times = default_times(float(getattr(tables, "t_f", 1.0)))
    times = np.asarray(times, dtype=float)
    t_f = float(times[-1])
    if np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ValueError("times must be increasing and start at >= 0")
    frame = frame or make_frame("heisenberg", tables(t_f).alpha)
    g = potentials.phi_f.log_values
    f = potentials.phihat_0.log_values
    w = grid.cell_weight

    gaps = sorted({round(t_f - t, 12) for t in times} | {round(t, 12) for t in times})
    q_of_gap: dict = {}
    p_of_gap: dict = {}
    for s in gaps:
        if s <= 0.0:
            q_of_gap[s], p_of_gap[s] = g, f
            continue
        tab = tables(s)
        if abs(tab.epsilon - eps) > 1e-12 * eps:
            raise ValueError("table noise level does not match the potentials")
        K = grid_kernel(grid, tab)
        # P and Q share the kernel; a symmetric table needs one operator
        q_of_gap[s] = K.propagate_log(g, transpose=False)
        p_of_gap[s] = K.propagate_log(f, transpose=True)
        log.debug("eps=%g: propagated gap %.4f", eps, s)

    log_phi, log_phihat, rho, mass = [], [], [], []
    for t in times:
        lp = q_of_gap[round(t_f - t, 12)]
        lh = p_of_gap[round(t, 12)]
        lr = lp + lh
        vals = np.exp(lr)
        m = float(np.sum(vals) * w)
        log_phi.append(lp)
        log_phihat.append(lh)
        rho.append(ScalarField(grid, vals / m, kind="density", name="rho"))
        mass.append(m)
        if abs(m - 1.0) > 1e-3:
            log.info("eps=%g t=%.4f: bridge mass %.6f before renormalisation", eps, t, m)
    e0 = _l1(rho[0].values, rho_0.values, w)
    e1 = _l1(rho[-1].values, rho_f.values, w)
    if check and max(e0, e1) > ENDPOINT_FAIL:
        raise EndpointMismatchError(f"bridge endpoints miss targets: L1 {e0:.3g}, {e1:.3g}")
    control = [control_field(ScalarField(grid, log_values=lp, kind="potential"), eps, frame)
               for lp in log_phi]
    bridge = BridgeSolution(epsilon=eps, times=times, log_phi=log_phi, log_phihat=log_phihat,
                            rho=rho, control=control, mass_raw=np.asarray(mass),
                            endpoint_l1=(e0, e1), frame=frame, grid=grid)
    bridge.cost = transport_cost(bridge)
    bridge.kl_static = static_kl(potentials, tables(t_f), rho_0)
    return bridge


def grad_log(phi: ScalarField) -> np.ndarray:
    """Gradient of ``log phi`` with second-order differences, shape ``(N, 3)``."""
    grid = phi.grid
    L = phi.log_values.reshape(grid.dims)
    grads = np.gradient(L, *grid.spacing, edge_order=2)
    return np.stack([gk.ravel() for gk in grads], axis=1)


def control_field(phi: ScalarField, epsilon: float, frame: HorizontalFrame) -> np.ndarray:
    """Feedback control ``eps g^T grad log phi`` at every node, shape ``(N, m)``."""
    if not np.all(np.isfinite(phi.log_values)):
        raise ValueError("phi must be strictly positive")
    G = frame_arrays(frame, phi.grid.points())
    return float(epsilon) * np.einsum("nim,ni->nm", G, grad_log(phi))


def horizontal_velocity(bridge: BridgeSolution, j: int) -> np.ndarray:
    """Spatial drift ``g u`` at sample ``j``, shape ``(N, 3)``."""
    G = frame_arrays(bridge.frame, bridge.grid.points())
    return np.einsum("nim,nm->ni", G, bridge.control[j])


def transport_cost(bridge: BridgeSolution) -> float:
    """Trapezoidal ``int 1/2 |u|^2 rho dx dt`` over the bridge samples."""
    w = bridge.grid.cell_weight
    dens = np.array([0.5 * np.sum(np.sum(u ** 2, axis=1) * r.values) * w
                     for u, r in zip(bridge.control, bridge.rho)])
    trap = getattr(np, "trapezoid", None) or np.trapz
    return float(trap(dens, bridge.times))


def static_kl(potentials: Potentials, table: KernelTable, rho_0: ScalarField,
              reference: str = "kernel") -> float:
    """``KL(pi || r)`` of the discrete endpoint coupling.

    ``pi_ij = phihat_0(x_i) p(x_i, x_j) phi_f(x_j) w^2`` and, for
    ``reference="kernel"``, ``r_ij = rho_0(x_i) p(x_i, x_j) w^2``.  With
    ``reference="row_normalized"`` each row of ``r`` is scaled to the mass of
    ``rho_0(x_i) w``, which makes ``r`` a probability coupling even where the
    grid kernel is not stochastic.
    """
    grid = rho_0.grid
    K = grid_kernel(grid, table)
    f = potentials.phihat_0.log_values
    g = potentials.phi_f.log_values
    with np.errstate(divide="ignore"):
        a = np.log(rho_0.values)
    row = np.exp(f + K.log_apply(g, transpose=False))   # pi marginal over i, / w
    col = np.exp(g + K.log_apply(f, transpose=True))    # pi marginal over j, / w
    w = grid.cell_weight
    # log(pi / r) = f_i + g_j - a_i, so the double sum splits over marginals
    kl = float(np.sum((f - a) * row) * w + np.sum(g * col) * w)
    if reference == "row_normalized":
        logZ = K.log_apply(np.zeros(grid.size), transpose=False)
        kl += float(np.sum(logZ * row) * w)
    elif reference != "kernel":
        raise ValueError(f"unknown reference {reference!r}")
    return kl


def bridge_at(bridge: BridgeSolution, t: float) -> int:
    j = int(np.argmin(np.abs(bridge.times - t)))
    return j


def fokker_planck_check(bridge: BridgeSolution, center=(0.0, 0.0, 0.0), width: float = 1.5,
                        samples=None) -> list:
    """Weak forward-equation residuals at interior samples.

    Pairs ``d/dt int psi rho`` (central difference in time) with
    ``int (g u . grad psi + eps/2 sum_i g_i . grad(g_i . grad psi)) rho`` for a
    Gaussian test function ``psi``; returns ``[(t, lhs, rhs, rel)]``.
    """
    grid = bridge.grid
    pts = grid.points() - np.asarray(center, dtype=float)
    s2 = width ** 2
    psi = np.exp(-0.5 * np.sum(pts ** 2, axis=1) / s2)
    grad = -pts / s2 * psi[:, None]
    hess = (pts[:, :, None] * pts[:, None, :] / s2 ** 2 - np.eye(3)[None] / s2) * psi[:, None,
                                                                                     None]
    G = frame_arrays(bridge.frame, grid.points())
    # sum_i g_i . grad(g_i . grad psi) = tr(G Hess) + sum_i (Dg_i g_i) . grad psi
    gen2 = np.einsum("nim,nij,njm->n", G, hess, G)
    if bridge.frame.kind == "heisenberg":
        # Dg_1 g_1 = Dg_2 g_2 = 0 for this frame; nothing to add
        pass
    w = grid.cell_weight
    eps = bridge.epsilon
    out = []
    idx = range(1, len(bridge.times) - 1) if samples is None else samples
    for j in idx:
        t0, t1 = bridge.times[j - 1], bridge.times[j + 1]
        lhs = (np.sum(psi * bridge.rho[j + 1].values) - np.sum(psi * bridge.rho[j - 1].values)) \
            * w / (t1 - t0)
        drift = np.einsum("nim,nm->ni", G, bridge.control[j])
        rhs = float(np.sum((np.sum(drift * grad, axis=1) + 0.5 * eps * gen2)
                           * bridge.rho[j].values) * w)
        rel = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
        out.append((float(bridge.times[j]), float(lhs), rhs, float(rel)))
    return out
