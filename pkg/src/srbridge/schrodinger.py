"""Sinkhorn fixed point for the Schrodinger system on a grid.

Potentials are carried as logarithms: ``f = log phihat_0`` and
``g = log phi_f``.  One iteration is the alternating pair

    f <- log rho_0 - log Q(exp g)
    g <- log rho_f - log P(exp f)

followed by a shift making ``max g = 0`` (compensated in ``f``).  Three
numerically different but mathematically identical engines run it:

* ``dense``: scaling domain with BLAS block products, used while the
  kernel and potentials fit in double range (large ``eps``).
* ``sparse``: log-stabilised scaling on a truncated support of the
  coupling, with absorption of the scalings into the support values
  (small ``eps``).
* ``log``: dense log-sum-exp, used to certify and polish the result.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import _backend
from .discretization import GridKernel, ScalarField, grid_kernel
from .errors import ConvergenceError, DivisionUnderflowError
from .heat_kernel import KernelTable

log = logging.getLogger(__name__)

TINY = 1e-300
LOG_TINY = np.log(TINY)


@dataclass(frozen=True)
class SinkhornConfig:
    """Schedule and stopping rules.

    Parameters
    ----------
    epsilon_schedule : sequence of float
        Strictly decreasing noise levels.
    tol : float
        Target Hilbert-metric distance between successive ``phi_f``.
    max_iters : int
        Iteration cap per noise level.
    marginal_tol : float
        L1 gate on both marginals once the residual target is met.
    warm_start : bool
        Start each level from the previous one's potential.
    warm_start_mode : str
        ``literal`` reuses the previous ``phi_f`` as is; ``scaled`` rescales
        its logarithm by ``eps_prev / eps``.
    method : str
        ``auto``, ``dense``, ``sparse`` or ``log``.
    """

    epsilon_schedule: tuple = (1.0, 0.5, 0.1, 0.01)
    tol: float = 1e-8
    max_iters: int = 5000
    marginal_tol: float = 1e-6
    warm_start: bool = True
    warm_start_mode: str = "literal"
    method: str = "auto"
    truncation: float = 40.0
    absorb: float = 100.0
    sparse_budget: int = 25_000_000

    def __post_init__(self):
        sched = tuple(float(e) for e in self.epsilon_schedule)
        object.__setattr__(self, "epsilon_schedule", sched)
        if not sched or any(e <= 0 for e in sched):
            raise ValueError("epsilon schedule must be nonempty and positive")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ValueError("epsilon schedule must be strictly decreasing")
        if self.tol <= 0 or self.marginal_tol <= 0 or self.max_iters < 1:
            raise ValueError("tolerances must be positive and max_iters >= 1")
        if self.warm_start_mode not in ("literal", "scaled"):
            raise ValueError(f"unknown warm start mode {self.warm_start_mode!r}")
        if self.method not in ("auto", "dense", "sparse", "log"):
            raise ValueError(f"unknown Sinkhorn method {self.method!r}")


@dataclass
class Potentials:
    """Converged pair for one noise level plus its convergence record."""

    epsilon: float
    phi_f: ScalarField
    phihat_0: ScalarField
    iterations: int
    hilbert_residuals: list
    marginal_errors: tuple
    method: str = "log"
    warm_started: bool = False
    converged: bool = True
    seconds: float = 0.0
    engine_log: list = field(default_factory=list)

    @property
    def final_residual(self) -> float:
        return self.hilbert_residuals[-1] if self.hilbert_residuals else float("inf")

    def contraction_factors(self) -> np.ndarray:
        r = np.asarray(self.hilbert_residuals, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return r[1:] / r[:-1]

    def summary(self) -> dict:
        from .report import downsample
        return {"epsilon": self.epsilon, "iterations": self.iterations,
                "final_residual": self.final_residual,
                "residuals": downsample(self.hilbert_residuals),
                "marginal_l1": list(self.marginal_errors), "method": self.method,
                "warm_started": self.warm_started, "converged": self.converged,
                "engine_log": self.engine_log}


# ---------------------------------------------------------------------------
# metric and single step
# ---------------------------------------------------------------------------

def hilbert_metric_log(lu, lv) -> float:
    """Hilbert projective distance between ``exp(lu)`` and ``exp(lv)``."""
    d = np.asarray(lu, dtype=float) - np.asarray(lv, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("Hilbert metric needs finite, positive inputs")
    return float(np.max(d) - np.min(d))


def hilbert_metric(u, v) -> float:
    """``log max(u / v) - log min(u / v)`` for strictly positive ``u, v``."""
    if isinstance(u, ScalarField):
        lu = u.log_values
    else:
        u = np.asarray(u, dtype=float)
        if np.any(u <= 0):
            raise ValueError("Hilbert metric needs strictly positive inputs")
        lu = np.log(u)
    if isinstance(v, ScalarField):
        lv = v.log_values
    else:
        v = np.asarray(v, dtype=float)
        if np.any(v <= 0):
            raise ValueError("Hilbert metric needs strictly positive inputs")
        lv = np.log(v)
    return hilbert_metric_log(lu, lv)


def _log_density(rho: ScalarField) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(rho.values)


def sinkhorn_step(phi_f: ScalarField, rho_0: ScalarField, rho_f: ScalarField,
                  table: KernelTable) -> tuple[ScalarField, ScalarField]:
    """One alternating update, returning ``(phihat_0, phi_f_next)``.

    Raises
    ------
    DivisionUnderflowError
        When a denominator underflows the double range.
    """
    K = grid_kernel(rho_0.grid, table)
    f, g = _half_steps(K, phi_f.log_values, _log_density(rho_0), _log_density(rho_f))
    return (ScalarField(rho_0.grid, log_values=f, kind="potential", name="phihat_0"),
            ScalarField(rho_0.grid, log_values=g, kind="potential", name="phi_f"))


def _half_steps(K: GridKernel, g, a, b):
    qg = K.log_apply(g, transpose=False)
    if np.any(qg < LOG_TINY):
        raise DivisionUnderflowError("backward semigroup underflow in Sinkhorn step")
    f = a - qg
    pf = K.log_apply(f, transpose=True)
    if np.any(pf < LOG_TINY):
        raise DivisionUnderflowError("forward semigroup underflow in Sinkhorn step")
    return f, b - pf


def marginal_errors(K: GridKernel, f, g, rho_0: ScalarField, rho_f: ScalarField) -> tuple:
    """Exact L1 errors of both marginals through the dense log kernel."""
    w = rho_0.grid.cell_weight
    m0 = np.exp(f + K.log_apply(g, transpose=False))
    m1 = np.exp(g + K.log_apply(f, transpose=True))
    return (float(np.sum(np.abs(m0 - rho_0.values)) * w),
            float(np.sum(np.abs(m1 - rho_f.values)) * w))


# ---------------------------------------------------------------------------
# engines
# ---------------------------------------------------------------------------

class _Engine:
    """Iterates from ``g`` and reports ``(g, residuals)``."""

    name = "base"

    def __init__(self, K: GridKernel, a, b, cfg: SinkhornConfig):
        self.K, self.a, self.b, self.cfg = K, a, b, cfg

    def run(self, g, budget: int, residuals: list):
        raise NotImplementedError


class _LogEngine(_Engine):
    name = "log"

    def run(self, g, budget, residuals):
        for _ in range(budget):
            f, g_new = _half_steps(self.K, g, self.a, self.b)
            g_new = g_new - np.max(g_new)
            residuals.append(hilbert_metric_log(g_new, g))
            g = g_new
            if residuals[-1] <= self.cfg.tol:
                break
        return g


class _DenseEngine(_Engine):
    """Scaling-domain iteration with BLAS; raises when double range is left."""

    name = "dense"

    def run(self, g, budget, residuals):
        K = self.K
        r0 = np.exp(self.a)
        r1 = np.exp(self.b)
        v = np.exp(g - np.max(g))
        lg = np.log(v)
        with np.errstate(under="ignore", over="raise", divide="raise", invalid="raise"):
            for _ in range(budget):
                q = K.apply(v)
                if not np.all(q > TINY) or not np.all(np.isfinite(q)):
                    raise DivisionUnderflowError("dense Sinkhorn left the double range")
                u = r0 / q
                p = K.apply(u, transpose=True)
                if not np.all(p > TINY) or not np.all(np.isfinite(p)):
                    raise DivisionUnderflowError("dense Sinkhorn left the double range")
                v = r1 / p
                v = v / np.max(v)
                if not np.all(v > TINY):
                    raise DivisionUnderflowError("dense Sinkhorn potential underflow")
                lg_new = np.log(v)
                residuals.append(hilbert_metric_log(lg_new, lg))
                lg = lg_new
                if residuals[-1] <= self.cfg.tol:
                    break
        return lg


class _SparseEngine(_Engine):
    """Log-stabilised scaling on a truncated coupling support.

    The support keeps entries of ``logK + f0 (+) g0`` within ``truncation``
    of their row or column maximum.  Scalings ``u, v`` multiply the stored
    values and are absorbed into ``f0, g0`` (with a rebuild) once either
    leaves ``[-absorb, absorb]`` in log scale.
    """

    name = "sparse"

    def __init__(self, K, a, b, cfg):
        super().__init__(K, a, b, cfg)
        self.rebuilds = 0
        self.nnz = 0

    def _to_blocks(self, x):
        P, nz = self.K.shape
        return np.ascontiguousarray(np.asarray(x).reshape(P, nz).T)

    def _build(self, f0, g0):
        K = self.K
        th = _backend.threads()
        fb, gb = self._to_blocks(f0), self._to_blocks(g0)
        rmax = np.asarray(_backend.get("log_block_max")(K.logK, gb, th)) + fb
        cmax = np.asarray(_backend.get("log_block_max")(K.logK_T, fb, th)) + gb
        indptr, indices, vals = _backend.get("sparse_support")(
            K.logK, fb, gb, rmax - self.cfg.truncation, cmax - self.cfg.truncation, th)
        n = K.grid.size
        # block order (z, p) flattened as p * nz + z matches the field order
        M = sparse.csr_matrix((np.exp(vals), np.asarray(indices), np.asarray(indptr)),
                              shape=(n, n))
        self.rebuilds += 1
        self.nnz = M.nnz
        log.debug("sparse support rebuilt: nnz=%d", M.nnz)
        return M, M.T.tocsr()

    def _rebuild(self, g0):
        f0 = self.a - self.K.log_apply(g0, transpose=False)
        M, MT = self._build(f0, g0)
        return f0, M, MT

    def run(self, g, budget, residuals):
        a, b, cfg = self.a, self.b, self.cfg
        g0 = g - np.max(g)
        f0, M, MT = self._rebuild(g0)
        lv = np.zeros_like(g0)
        lg = g0.copy()
        it = 0
        with np.errstate(divide="ignore"):
            while it < budget:
                lu = a - np.log(M @ np.exp(lv))
                if not np.all(np.isfinite(lu)):
                    raise DivisionUnderflowError("sparse support lost a row")
                if np.max(np.abs(lu)) > cfg.absorb:
                    g0 = g0 + lv
                    f0, M, MT = self._rebuild(g0 - np.max(g0))
                    g0 -= np.max(g0)
                    lu = np.zeros_like(f0)
                p = MT @ np.exp(lu)
                if not np.all(p > TINY):
                    # columns out of range: one exact log step rebalances them
                    g0 = b - self.K.log_apply(f0 + lu, transpose=True)
                    g0 -= np.max(g0)
                    f0, M, MT = self._rebuild(g0)
                    lv = np.zeros_like(g0)
                    lg_new = g0
                else:
                    lv = b - np.log(p)
                    lg_new = g0 + lv
                    lg_new = lg_new - np.max(lg_new)
                residuals.append(hilbert_metric_log(lg_new, lg))
                lg = lg_new
                it += 1
                if residuals[-1] <= cfg.tol:
                    break
                if np.max(np.abs(lv)) > cfg.absorb or np.max(np.abs(lu)) > cfg.absorb:
                    g0 = lg.copy()
                    f0, M, MT = self._rebuild(g0)
                    lv = np.zeros_like(g0)
        return lg


def _support_estimate(K: GridKernel, truncation: float) -> int:
    """Pairs whose kernel value is within ``truncation`` of the diagonal."""
    P, nz = K.shape
    top = np.max(K.logK)
    total = 0
    for k, dz in enumerate(K.geometry.offsets):
        total += int(np.count_nonzero(K.logK[k] >= top - truncation)) * (nz - abs(dz))
    return total


def _pick_engines(K: GridKernel, cfg: SinkhornConfig) -> list:
    if cfg.method != "auto":
        return [cfg.method, "log"] if cfg.method != "log" else ["log"]
    if np.min(K.logK) > -600.0:
        return ["dense", "sparse", "log"]
    if _support_estimate(K, cfg.truncation) <= cfg.sparse_budget:
        return ["sparse", "log"]
    return ["log"]


_ENGINES = {"log": _LogEngine, "dense": _DenseEngine, "sparse": _SparseEngine}


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def solve_single(rho_0: ScalarField, rho_f: ScalarField, table: KernelTable,
                 cfg: SinkhornConfig, g_init=None, warm_started: bool = False) -> Potentials:
    """Run the fixed point at one noise level from ``g_init`` (ones if absent)."""
    t0 = time.perf_counter()
    grid = rho_0.grid
    K = grid_kernel(grid, table)
    a, b = _log_density(rho_0), _log_density(rho_f)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("boundary densities must be strictly positive on the grid")
    g = np.zeros(grid.size) if g_init is None else np.asarray(g_init, dtype=float).copy()
    g -= np.max(g)
    residuals: list = []
    engines = _pick_engines(K, cfg)
    used = []
    engine_log = []
    for name in engines:
        budget = cfg.max_iters - len(residuals)
        if budget <= 0:
            break
        eng = _ENGINES[name](K, a, b, cfg)
        n_before = len(residuals)
        try:
            g = eng.run(g, budget, residuals)
        except (DivisionUnderflowError, FloatingPointError) as exc:
            engine_log.append({"engine": name, "iterations": len(residuals) - n_before,
                               "abandoned": str(exc)})
            log.info("eps=%g: %s engine abandoned (%s)", table.epsilon, name, exc)
            continue
        rec = {"engine": name, "iterations": len(residuals) - n_before}
        if name == "sparse":
            rec.update(rebuilds=eng.rebuilds, nnz=eng.nnz)
        engine_log.append(rec)
        used.append(name)
        if residuals and residuals[-1] <= cfg.tol:
            # certify with the exact kernel; a truncated engine may need polishing
            f = a - K.log_apply(g, transpose=False)
            errs = marginal_errors(K, f, g, rho_0, rho_f)
            if max(errs) <= cfg.marginal_tol or name == "log":
                break
            engine_log[-1]["uncertified_marginals"] = list(errs)
    f = a - K.log_apply(g, transpose=False)
    errs = marginal_errors(K, f, g, rho_0, rho_f)
    converged = bool(residuals) and residuals[-1] <= cfg.tol and max(errs) <= cfg.marginal_tol
    pot = Potentials(
        epsilon=float(table.epsilon),
        phi_f=ScalarField(grid, log_values=g, kind="potential", name="phi_f"),
        phihat_0=ScalarField(grid, log_values=f, kind="potential", name="phihat_0"),
        iterations=len(residuals), hilbert_residuals=residuals, marginal_errors=errs,
        method="+".join(used) if used else "none", warm_started=warm_started,
        converged=converged, seconds=time.perf_counter() - t0, engine_log=engine_log)
    log.info("eps=%g: %d iterations, residual %.3g, marginals %.3g %.3g (%s)",
             pot.epsilon, pot.iterations, pot.final_residual, errs[0], errs[1], pot.method)
    return pot


def warm_start_potential(prev: Potentials, epsilon: float, mode: str = "literal") -> np.ndarray:
    """Initial ``log phi_f`` for ``epsilon`` from a converged coarser level.

    ``literal`` returns the previous potential unchanged.  ``scaled`` uses
    that ``eps log phi_f`` has a finite limit as ``eps -> 0`` and rescales
    the log potential by ``eps_prev / eps``.
    """
    if mode == "literal":
        return prev.phi_f.log_values.copy()
    if mode == "scaled":
        return prev.phi_f.log_values * (prev.epsilon / float(epsilon))
    raise ValueError(f"unknown warm start mode {mode!r}")


def solve_schrodinger(rho_0: ScalarField, rho_f: ScalarField, cfg: SinkhornConfig,
                      tables) -> list[Potentials]:
    """Anneal through ``cfg.epsilon_schedule`` with warm starts.

    Parameters
    ----------
    tables : mapping or sequence
        One kernel table per schedule entry (keyed by ``eps`` or in order),
        all for the same horizon.

    Raises
    ------
    ConvergenceError
        On the first level that misses the targets; ``completed`` holds the
        potentials of that and all earlier levels.
    """
    if isinstance(tables, dict):
        tabs = [tables[e] for e in cfg.epsilon_schedule]
    else:
        tabs = list(tables)
    if len(tabs) != len(cfg.epsilon_schedule):
        raise ValueError("need one kernel table per schedule entry")
    horizons = {round(t.t, 12) for t in tabs}
    if len(horizons) != 1:
        raise ValueError("all kernel tables must share the horizon t_f")
    out: list[Potentials] = []
    prev = None
    for eps, tab in zip(cfg.epsilon_schedule, tabs):
        if abs(tab.epsilon - eps) > 1e-12 * eps:
            raise ValueError(f"table eps {tab.epsilon} does not match schedule entry {eps}")
        g0 = None
        warm = False
        if prev is not None and cfg.warm_start:
            g0 = warm_start_potential(prev, eps, cfg.warm_start_mode)
            warm = True
        pot = solve_single(rho_0, rho_f, tab, cfg, g_init=g0, warm_started=warm)
        out.append(pot)
        if not pot.converged:
            raise ConvergenceError(
                f"Sinkhorn did not converge at eps={eps}: residual {pot.final_residual:.3g}, "
                f"marginals {pot.marginal_errors[0]:.3g} {pot.marginal_errors[1]:.3g}",
                residuals=pot.hilbert_residuals, completed=out)
        prev = pot
    return out


def log_coupling_row(K: GridKernel, pot: Potentials, i: int) -> np.ndarray:
    """Log coupling ``f_i + log p(x_i, .) + log w + g`` for one source node."""
    P, nz = K.shape
    p0, z0 = divmod(i, nz)
    f = pot.phihat_0.log_values
    g = pot.phi_f.log_values.reshape(P, nz)
    row = np.empty((P, nz))
    for z1 in range(nz):
        row[:, z1] = K.logK[z1 - z0 + nz - 1, p0, :] + g[:, z1]
    return f[i] + row.reshape(-1)

