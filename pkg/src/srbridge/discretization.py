"""Regular grids, boundary densities and kernel quadrature semigroups.

Node ordering is z fastest, then y, then x.  For a grid with ``P = Nx Ny``
planar nodes and ``Nz`` heights, the kernel between two nodes depends on the
planar pair ``(p0, p1)`` and on the height offset ``k = iz1 - iz0`` only, so
the full ``N x N`` operator is stored as ``(2 Nz - 1, P, P)`` blocks of log
kernel values (block Toeplitz in z).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf

from . import _backend
from .errors import DegenerateMassError
from .heat_kernel import DEFAULT_QUAD, KernelTable, QuadratureSpec, tabulate

log = logging.getLogger(__name__)

DEFAULT_POINT_CAP = 24 ** 3


@dataclass(frozen=True)
class Grid3D:
    origin: tuple
    spacing: tuple
    dims: tuple
    point_cap: int = DEFAULT_POINT_CAP

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.origin) != 3 or len(self.spacing) != 3 or len(self.dims) != 3:
            raise ValueError("grid vectors must have length 3")
        if min(self.spacing) <= 0:
            raise ValueError("grid spacing must be positive")
        if min(self.dims) < 8:
            raise ValueError("grid dims must be >= 8")
        if self.size > self.point_cap:
            raise ValueError(f"grid has {self.size} points, above the cap {self.point_cap}")

    @classmethod
    def from_bounds(cls, lower, upper, dims, point_cap: int = DEFAULT_POINT_CAP) -> "Grid3D":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        dims = np.asarray(dims, dtype=int)
        return cls(tuple(lower), tuple((upper - lower) / (dims - 1)), tuple(dims), point_cap)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def cell_weight(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.spacing) * (np.asarray(self.dims) - 1)

    def axis(self, k: int) -> np.ndarray:
        return self.origin[k] + self.spacing[k] * np.arange(self.dims[k])

    def points(self) -> np.ndarray:
        return _points(self)

    def to_json(self) -> dict:
        return {"origin": list(self.origin), "spacing": list(self.spacing), "dims": list(self.dims)}


@lru_cache(maxsize=8)
def _points(grid: Grid3D) -> np.ndarray:
    X, Y, Z = np.meshgrid(grid.axis(0), grid.axis(1), grid.axis(2), indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    pts.setflags(write=False)
    return pts


def default_grid() -> Grid3D:
    return Grid3D.from_bounds((-4.5, -4.5, -3.0), (4.5, 4.5, 3.0), (24, 24, 24))


class ScalarField:
    """Node values on a grid, stored either directly or as logarithms.

    Potentials at small ``eps`` span far more than the double range, so
    they are carried as ``log_values``; ``values`` is derived on demand.
    """

    KINDS = ("density", "potential")

    def __init__(self, grid: Grid3D, values=None, *, log_values=None, kind: str = "density",
                 name: str = ""):
        if kind not in self.KINDS:
            raise ValueError(f"unknown field kind {kind!r}")
        if (values is None) == (log_values is None):
            raise ValueError("give exactly one of values or log_values")
        self.grid = grid
        self.kind = kind
        self.name = name
        if values is not None:
            v = np.asarray(values, dtype=float).ravel()
            if v.size != grid.size:
                raise ValueError("field size does not match the grid")
            if kind == "density" and np.any(v < 0):
                raise ValueError("density values must be nonnegative")
            if kind == "potential" and not np.all(v > 0):
                raise ValueError("potential values must be positive")
            self._values, self._log = v, None
        else:
            lv = np.asarray(log_values, dtype=float).ravel()
            if lv.size != grid.size:
                raise ValueError("field size does not match the grid")
            if kind == "potential" and not np.all(np.isfinite(lv)):
                raise ValueError("potential log-values must be finite")
            self._values, self._log = None, lv

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = np.exp(self._log)
        return self._values

    @property
    def log_values(self) -> np.ndarray:
        if self._log is None:
            with np.errstate(divide="ignore"):
                self._log = np.log(self._values)
        return self._log

    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.cell_weight)

    def normalized(self) -> "ScalarField":
        m = self.mass()
        if not m > 0:
            raise DegenerateMassError("cannot normalise a field with zero mass")
        return ScalarField(self.grid, self.values / m, kind="density", name=self.name)

    def reshape(self) -> np.ndarray:
        return self.values.reshape(self.grid.dims)

    def save(self, directory: str, field_name: str | None = None, time: float | None = None):
        save_field_bundle(directory, self, field_name or self.name, time)


def save_field_bundle(directory: str, fld: ScalarField, field_name: str, time=None,
                      data=None) -> None:
    """Write ``meta.json`` and ``data.f64le`` for a field (or explicit data)."""
    from .report import dumps_deterministic
    os.makedirs(directory, exist_ok=True)
    arr = fld.values if data is None else np.asarray(data, dtype=float)
    meta = {"field_name": field_name, "time": time, "grid": fld.grid.to_json(),
            "order": "z-fastest", "dtype": "f64le", "kind": fld.kind}
    if data is not None and arr.ndim > 1:
        meta["components"] = int(arr.shape[-1])
    with open(os.path.join(directory, "meta.json"), "w", newline="\n") as fh:
        fh.write(dumps_deterministic(meta))
    np.ascontiguousarray(arr, dtype="<f8").tofile(os.path.join(directory, "data.f64le"))


def load_field_bundle(directory: str) -> ScalarField:
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    g = meta["grid"]
    grid = Grid3D(g["origin"], g["spacing"], g["dims"], point_cap=max(DEFAULT_POINT_CAP,
                                                                     int(np.prod(g["dims"]))))
    data = np.fromfile(os.path.join(directory, "data.f64le"), dtype="<f8")
    return ScalarField(grid, data, kind=meta.get("kind", "density"), name=meta["field_name"])


# ---------------------------------------------------------------------------
# boundary densities
# ---------------------------------------------------------------------------

def _axis_capture(lo, hi, mean, sigma):
    return 0.5 * (erf((hi - mean) / (np.sqrt(2) * sigma)) - erf((lo - mean) / (np.sqrt(2) * sigma)))


def gaussian_density(grid: Grid3D, mean=(0.0, 0.0, 0.0), sigmas=(0.55, 0.55, 0.55)) -> ScalarField:
    """Axis-aligned Gaussian at the nodes, renormalised to unit discrete mass."""
    mean = np.asarray(mean, dtype=float)
    sig = np.asarray(sigmas, dtype=float)
    if np.any(sig <= 0):
        raise ValueError("sigmas must be positive")
    captured = np.prod([_axis_capture(grid.origin[k], grid.upper[k], mean[k], sig[k])
                        for k in range(3)])
    if captured < 0.99:
        raise DegenerateMassError(f"grid captures only {captured:.4f} of the Gaussian mass")
    pts = grid.points()
    q = np.sum(((pts - mean) / sig) ** 2, axis=1)
    vals = np.exp(-0.5 * q) / ((2 * np.pi) ** 1.5 * np.prod(sig))
    return ScalarField(grid, vals, name="rho_0").normalized()


def ring_profile(pts, R0, sR, mz, sigma_z):
    r = np.hypot(pts[..., 0], pts[..., 1])
    return np.exp(-((r - R0) ** 2) / (2 * sR ** 2)) * np.exp(-((pts[..., 2] - mz) ** 2) / (2 * sigma_z ** 2))


def ring_mass(R0, sR, sigma_z, rmax=np.inf, zlo=-np.inf, zhi=np.inf, mz=0.0):
    """Integral of the ring profile over a cylinder, by quadrature in r."""
    from scipy.integrate import quad
    rr = quad(lambda r: 2 * np.pi * r * np.exp(-((r - R0) ** 2) / (2 * sR ** 2)),
              0.0, rmax if np.isfinite(rmax) else R0 + 40 * sR, limit=200)[0]
    zz = np.sqrt(2 * np.pi) * sigma_z * _axis_capture(zlo, zhi, mz, sigma_z)
    return rr * zz


def ring_density(grid: Grid3D, R0: float = 2.5, sR: float = 0.45, mz: float = 0.0,
                 sigma_z: float = 0.70) -> ScalarField:
    """Ring profile at the nodes, normalised numerically to unit discrete mass."""
    if min(R0, sR, sigma_z) <= 0:
        raise ValueError("R0, sR and sigma_z must be positive")
    # the inscribed cylinder of the box gives a lower bound on captured mass
    rin = min(abs(grid.origin[0]), abs(grid.upper[0]), abs(grid.origin[1]), abs(grid.upper[1]))
    captured = ring_mass(R0, sR, sigma_z, rin, grid.origin[2], grid.upper[2], mz) / ring_mass(
        R0, sR, sigma_z, mz=mz)
    if captured < 0.99:
        raise DegenerateMassError(f"grid captures only {captured:.4f} of the ring mass")
    vals = ring_profile(grid.points(), R0, sR, mz, sigma_z)
    return ScalarField(grid, vals, name="rho_f").normalized()


# ---------------------------------------------------------------------------
# kernel operators on the grid
# ---------------------------------------------------------------------------

class GridGeometry:
    """Pair geometry of a grid: planar radii, twists and squared distances."""

    def __init__(self, grid: Grid3D, alpha: float, convention: str = "levy"):
        self.grid = grid
        self.alpha = float(alpha)
        self.convention = convention
        nx, ny, nz = grid.dims
        x = np.repeat(grid.axis(0), ny)
        y = np.tile(grid.axis(1), nx)
        dx = x[None, :] - x[:, None]
        dy = y[None, :] - y[:, None]
        self.P = nx * ny
        self.nz = nz
        self.rho = np.hypot(dx, dy)
        # z~ = k hz - twist[p0, p1] with twist = 2a (x0 y1 - y0 x1)
        self.twist = 2.0 * alpha * (x[:, None] * y[None, :] - y[:, None] * x[None, :])
        self.offsets = np.arange(-(nz - 1), nz)
        self._d2 = None

    @property
    def hz(self) -> float:
        return self.grid.spacing[2]

    def ztilde(self, k_index: int) -> np.ndarray:
        return np.abs(self.offsets[k_index] * self.hz - self.twist)

    @property
    def ztilde_max(self) -> float:
        return float((self.nz - 1) * self.hz + np.max(np.abs(self.twist)))

    @property
    def rho_max(self) -> float:
        return float(np.max(self.rho))

    def planar_radii(self) -> np.ndarray:
        """Distinct planar distances between nodes (exact table radii)."""
        return np.unique(np.round(self.rho, 12))

    def d2(self) -> np.ndarray:
        """Squared distances for every block entry, computed once."""
        if self._d2 is None:
            out = np.empty((self.offsets.size, self.P, self.P))
            r2 = np.ascontiguousarray((self.rho ** 2).ravel())
            fn = _backend.get("dist_sq_block")
            scale = 1.0 if self.convention == "levy" else 2.0 * self.alpha
            K = self.offsets.size
            # offsets -k and k are transposes of each other (bitwise)
            for k in range(self.nz - 1, K):
                zt = np.ascontiguousarray(scale * self.ztilde(k).ravel())
                out[k] = np.asarray(fn(r2, zt, self.alpha, _backend.threads())).reshape(self.P, self.P)
            for k in range(self.nz - 1):
                out[k] = out[K - 1 - k].T
            self._d2 = out
        return self._d2


@lru_cache(maxsize=2)
def grid_geometry(grid: Grid3D, alpha: float, convention: str = "levy") -> GridGeometry:
    return GridGeometry(grid, alpha, convention)


class GridKernel:
    """Discrete semigroup ``(K f)_i = sum_j p(x_i, x_j) f_j w`` on a grid.

    Holds ``logK[k, p0, p1] = log p + log w`` for height offset index ``k``.
    """

    def __init__(self, grid: Grid3D, table: KernelTable):
        self.grid = grid
        self.table = table
        geo = grid_geometry(grid, table.alpha, table.convention)
        self.geometry = geo
        d2 = geo.d2()
        logw = np.log(grid.cell_weight)
        self.logK = np.empty_like(d2)
        for k in range(geo.offsets.size):
            self.logK[k] = table.lookup_log(geo.rho, geo.ztilde(k), d2=d2[k]) + logw
        # transposed blocks: logK_T[k, p1, p0] = logK[2 nz - 2 - k, p0, p1]
        flipped = self.logK[::-1].transpose(0, 2, 1)
        if np.array_equal(flipped, self.logK):
            self.logK_T = self.logK
        else:
            self.logK_T = np.ascontiguousarray(flipped)
        self._K = None

    @property
    def symmetric(self) -> bool:
        return self.logK_T is self.logK

    @property
    def shape(self):
        return self.geometry.P, self.geometry.nz

    def dense_blocks(self) -> np.ndarray:
        """``exp(logK)`` (entries may underflow to zero)."""
        if self._K is None:
            with np.errstate(under="ignore"):
                self._K = np.exp(self.logK)
        return self._K

    def log_apply(self, logf: np.ndarray, transpose: bool = False) -> np.ndarray:
        """``log(K exp(logf))`` (or with the transposed kernel) in log-sum-exp form."""
        P, nz = self.shape
        g = np.ascontiguousarray(np.asarray(logf, dtype=float).reshape(P, nz).T)
        fn = _backend.get("log_block_matvec")
        out = fn(self.logK_T if transpose else self.logK, g, _backend.threads())
        return np.asarray(out).T.reshape(-1)

    def propagate_log(self, logf: np.ndarray, transpose: bool = False) -> np.ndarray:
        """``log_apply`` through BLAS when the result stays well inside double range."""
        logf = np.asarray(logf, dtype=float)
        if np.min(self.logK) > -700.0:
            top = np.max(logf)
            with np.errstate(under="ignore"):
                out = self.apply(np.exp(logf - top), transpose)
            if np.all(out > 1e-200):
                return np.log(out) + top
        return self.log_apply(logf, transpose)

    def apply(self, f: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Plain matvec with BLAS on the exponentiated blocks."""
        P, nz = self.shape
        K = self.dense_blocks()
        v = np.asarray(f, dtype=float).reshape(P, nz)
        out = np.zeros((P, nz))
        for k, dz in enumerate(self.geometry.offsets):
            if dz >= 0:
                zs0, zs1 = slice(0, nz - dz), slice(dz, nz)
            else:
                zs0, zs1 = slice(-dz, nz), slice(0, nz + dz)
            if not transpose:
                out[:, zs0] += K[k] @ v[:, zs1]
            else:
                out[:, zs1] += K[k].T @ v[:, zs0]
        return out.reshape(-1)


_kernel_cache: dict = {}


def grid_kernel(grid: Grid3D, table: KernelTable) -> GridKernel:
    key = (grid, id(table))
    gk = _kernel_cache.get(key)
    if gk is None or gk.table is not table:
        if len(_kernel_cache) >= 2:
            _kernel_cache.pop(next(iter(_kernel_cache)))
        gk = GridKernel(grid, table)
        _kernel_cache[key] = gk
    return gk


def table_for_grid(grid: Grid3D, t: float, epsilon: float, alpha: float,
                   quad: QuadratureSpec = DEFAULT_QUAD, n_z: int = 256,
                   convention: str = "levy") -> KernelTable:
    """Table covering every node pair of ``grid``; radii include all grid distances."""
    geo = grid_geometry(grid, alpha, convention)
    return tabulate(t, epsilon, alpha, geo.rho_max, geo.ztilde_max, n_rho=0, n_z=n_z,
                    quad=quad, rho_nodes=geo.planar_radii(), convention=convention)


class TableSet:
    """Kernel tables for one grid and noise level, cached by horizon."""

    def __init__(self, grid: Grid3D, epsilon: float, alpha: float,
                 quad: QuadratureSpec = DEFAULT_QUAD, n_z: int = 256, convention: str = "levy",
                 t_f: float = 1.0):
        self.grid, self.epsilon, self.alpha = grid, float(epsilon), float(alpha)
        self.t_f = float(t_f)
        self.quad, self.n_z, self.convention = quad, n_z, convention
        self._tables: dict = {}

    def __call__(self, t: float) -> KernelTable:
        key = round(float(t), 12)
        tab = self._tables.get(key)
        if tab is None:
            tab = table_for_grid(self.grid, key, self.epsilon, self.alpha, self.quad, self.n_z,
                                 self.convention)
            self._tables[key] = tab
        return tab

    def tables(self) -> list:
        return [self._tables[k] for k in sorted(self._tables)]


def _as_log(field: ScalarField) -> np.ndarray:
    lv = field.log_values
    if field.kind == "potential" and not np.all(np.isfinite(lv)):
        raise ValueError("potential must be strictly positive")
    return lv


def apply_Q(field: ScalarField, table: KernelTable, grid: Grid3D | None = None) -> ScalarField:
    """Backward semigroup ``(Q f)(x_i) = sum_j p(x_i, x_j) f(x_j) w``."""
    grid = grid or field.grid
    out = grid_kernel(grid, table).log_apply(_as_log(field), transpose=False)
    return ScalarField(grid, log_values=out, kind="potential")


def apply_P(field: ScalarField, table: KernelTable, grid: Grid3D | None = None) -> ScalarField:
    """Forward semigroup ``(P f)(y_j) = sum_i p(x_i, y_j) f(x_i) w``."""
    grid = grid or field.grid
    out = grid_kernel(grid, table).log_apply(_as_log(field), transpose=True)
    return ScalarField(grid, log_values=out, kind="potential")
