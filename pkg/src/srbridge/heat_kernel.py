"""Hypoelliptic heat kernel of the Heisenberg-type diffusion.

For the driftless diffusion ``dX = sqrt(eps) g(X) dW`` started at the
identity, the density at ``(x, y, z)`` after time ``t`` is

    p = 1 / (4 pi^2 a (eps t)^2) * I(A, B),
    I(A, B) = int_0^inf (s / sinh s) exp(-A s coth s) cos(B s) ds,

with ``A = rho^2 / (2 eps t)``, ``B = |z| / (2 a eps t)`` and ``a`` the bracket
strength.  ``I`` is evaluated on the horizontal line ``Im s = tau`` through
the saddle point of ``-A s coth s + i B s``; ``tau`` is the geodesic angle,
so the integrand carries the factor ``exp(-d^2 / (2 eps t))`` analytically and
values stay representable in log form for any ``eps``.

``convention="literal"`` evaluates the alternative constant choice
``(eps t)^-2 p(rho, 2 a z)``, whose total mass is ``1 / (2 a (eps t)^2)``; it is
kept only for normalisation diagnostics.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import _backend
from .distance import angle_from_offset, dist_sq_from_angle, solve_angle
from .errors import KernelNegativityError, QuadratureError
from .geometry import GroupPoint, group_inv, group_mul

log = logging.getLogger(__name__)

KERNEL_CONVENTIONS = ("levy", "literal")
_LOG_PI2_4 = np.log(np.pi ** 2 / 4.0)


@dataclass(frozen=True)
class QuadratureSpec:
    """Controls for the contour quadrature.

    Attributes
    ----------
    nodes_per_panel : int
        Gauss-Legendre order on each panel.
    rel_tol : float
        Panel acceptance tolerance, relative to the accumulated absolute
        integral.
    tail_tol : float
        Marching stops once the integrand drops below this fraction of the
        accumulated absolute integral.
    max_panels : int
        Cap on accepted plus rejected panels per evaluation.
    oscillation_periods : float
        Largest panel width in periods of the tail oscillation.
    """

    nodes_per_panel: int = 16
    rel_tol: float = 1e-10
    tail_tol: float = 1e-14
    max_panels: int = 20000
    oscillation_periods: float = 1.5

    def __post_init__(self):
        if self.nodes_per_panel < 4:
            raise ValueError("nodes_per_panel must be >= 4")
        if not (0 < self.rel_tol < 1) or not (0 < self.tail_tol < 1):
            raise ValueError("tolerances must lie in (0, 1)")
        if self.max_panels < 1:
            raise ValueError("max_panels must be >= 1")


DEFAULT_QUAD = QuadratureSpec()


@lru_cache(maxsize=8)
def _legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return np.ascontiguousarray(x), np.ascontiguousarray(w)


def _logcosh(x):
    x = np.abs(x)
    return x + np.log1p(np.exp(-2.0 * x)) - np.log(2.0)


def log_unit_integral(A, B, quad: QuadratureSpec = DEFAULT_QUAD, backend=None) -> np.ndarray:
    """``log I(A, B)`` for arrays of ``A >= 0`` and ``B >= 0``."""
    A = np.atleast_1d(np.asarray(A, dtype=float)).ravel()
    B = np.atleast_1d(np.abs(np.asarray(B, dtype=float))).ravel()
    A, B = np.broadcast_arrays(A, B)
    A = np.ascontiguousarray(A)
    B = np.ascontiguousarray(B)
    if np.any(A < 0) or not np.all(np.isfinite(A)) or not np.all(np.isfinite(B)):
        raise ValueError("A must be finite and nonnegative, B finite")
    out = np.empty(A.shape)
    on_axis = A == 0.0
    out[on_axis] = _LOG_PI2_4 - 2.0 * _logcosh(0.5 * np.pi * B[on_axis])
    # near the axis the saddle approaches the pole at pi; log I is smooth in A,
    # so interpolate linearly between the axis value and a safe cutoff
    a_cut = 1e-7 / (1.0 + B)
    near = (~on_axis) & (A < a_cut)
    if np.any(near):
        bn, an, cn = B[near], A[near], a_cut[near]
        at_cut = log_unit_integral(cn, bn, quad, backend)
        axis = _LOG_PI2_4 - 2.0 * _logcosh(0.5 * np.pi * bn)
        out[near] = axis + (an / cn) * (at_cut - axis)
    m = ~(on_axis | near)
    if np.any(m):
        a = A[m]
        b = B[m]
        with np.errstate(divide="ignore"):
            tau = np.where(b == 0.0, 0.0, solve_angle(np.where(b == 0.0, 0.0, b / a)))
        delta = np.pi - tau
        sin_t = np.sin(delta)
        small = tau < 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            tcot = np.where(small, 1.0 - tau * tau / 3.0, tau * np.cos(tau) / sin_t)
            l0 = np.where(small, -a, np.log(np.where(small, 1.0, tau / sin_t)) - a * tcot - b * tau)
            curv = np.where(small, 1.0 / 3.0, (1.0 - tcot) / (sin_t * sin_t))
        width = 1.0 / np.sqrt(a * curv + 1.0 / 3.0)
        with np.errstate(divide="ignore"):
            period = 2.0 * np.pi / np.maximum(b, 1e-300)
            hcap = np.minimum(2.0, np.where(b > 0.0, quad.oscillation_periods * period, 2.0))
        h0 = np.minimum(0.5 * np.minimum(width, delta), hcap)
        nodes, weights = _legendre(quad.nodes_per_panel)
        nodes_lo, weights_lo = _legendre(quad.nodes_per_panel // 2)
        fn = _backend.get("log_kernel_integrals", backend)
        logm, status = fn(np.ascontiguousarray(a), np.ascontiguousarray(b),
                          np.ascontiguousarray(tau), np.ascontiguousarray(l0),
                          np.ascontiguousarray(width), np.ascontiguousarray(h0),
                          np.ascontiguousarray(hcap), nodes, weights, nodes_lo, weights_lo,
                          float(quad.rel_tol), float(quad.tail_tol), int(quad.max_panels),
                          _backend.threads())
        status = np.asarray(status)
        if np.any(status == 1):
            k = int(np.argmax(status == 1))
            raise QuadratureError(
                f"kernel quadrature did not converge within {quad.max_panels} panels "
                f"(A={a[k]:.6g}, B={b[k]:.6g})")
        if np.any(status == 2):
            k = int(np.argmax(status == 2))
            raise KernelNegativityError(
                f"kernel quadrature returned a nonpositive value (A={a[k]:.6g}, B={b[k]:.6g})")
        out[m] = l0 + np.asarray(logm)
    return out


def _scaled_args(rho2, zabs, et, alpha, convention):
    A = np.asarray(rho2, dtype=float) / (2.0 * et)
    zabs = np.abs(np.asarray(zabs, dtype=float))
    if convention == "levy":
        B = zabs / (2.0 * alpha * et)
        pref = -np.log(4.0 * np.pi ** 2 * alpha * et * et)
    elif convention == "literal":
        B = zabs / et
        pref = -np.log(4.0 * np.pi ** 2 * alpha * et * et) - 2.0 * np.log(et)
    else:
        raise ValueError(f"unknown kernel convention {convention!r}")
    return A, B, pref


def log_kernel_offsets(rho2, zabs, t: float, epsilon: float, alpha: float,
                       quad: QuadratureSpec = DEFAULT_QUAD, convention: str = "levy",
                       backend=None) -> np.ndarray:
    """Log density at planar radius squared ``rho2`` and twisted height ``zabs``."""
    _check_positive(t, epsilon, alpha)
    et = epsilon * t
    rho2 = np.asarray(rho2, dtype=float)
    shape = np.broadcast(rho2, np.asarray(zabs)).shape
    A, B, pref = _scaled_args(rho2, zabs, et, alpha, convention)
    A, B = np.broadcast_arrays(A, B)
    return (pref + log_unit_integral(A.ravel(), B.ravel(), quad, backend)).reshape(shape)


def _check_positive(t, epsilon, alpha):
    if not (t > 0 and epsilon > 0 and alpha > 0):
        raise ValueError("t, epsilon and alpha must be positive")


def log_kernel_origin(q: GroupPoint, t: float, epsilon: float, alpha: float,
                      quad: QuadratureSpec = DEFAULT_QUAD, convention: str = "levy") -> float:
    return float(log_kernel_offsets(q.x * q.x + q.y * q.y, abs(q.z), t, epsilon, alpha,
                                    quad, convention)[()])


def kernel_origin(q: GroupPoint, t: float, epsilon: float, alpha: float,
                  quad: QuadratureSpec = DEFAULT_QUAD, convention: str = "levy") -> float:
    """Density from the identity to ``q``; always strictly positive.

    Examples
    --------
    >>> from srbridge.geometry import GroupPoint
    >>> round(kernel_origin(GroupPoint(0.0, 0.0, 0.0), 1.0, 1.0, 0.25), 12)
    0.25
    """
    val = float(np.exp(log_kernel_origin(q, t, epsilon, alpha, quad, convention)))
    if not val > 0:
        raise KernelNegativityError("kernel value underflowed to zero; use log_kernel_origin")
    return val


def kernel(q0: GroupPoint, q: GroupPoint, t: float, epsilon: float, alpha: float,
           quad: QuadratureSpec = DEFAULT_QUAD, convention: str = "levy") -> float:
    """Transition density from ``q0`` to ``q``, via ``q0^{-1} q``."""
    return kernel_origin(group_mul(group_inv(q0), q, alpha), t, epsilon, alpha, quad, convention)


def varadhan_rate(q: GroupPoint, t: float, epsilon: float, alpha: float,
                  quad: QuadratureSpec = DEFAULT_QUAD, convention: str = "levy") -> float:
    """``-2 t eps log p(0, q)`` from the unrenormalised kernel."""
    return -2.0 * t * epsilon * log_kernel_origin(q, t, epsilon, alpha, quad, convention)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def unit_mass(alpha: float, convention: str = "levy", quad: QuadratureSpec = DEFAULT_QUAD,
              panels: int = 16, order: int = 8) -> float:
    """Numerical total mass of the kernel at ``eps t = 1``.

    Cylindrical coordinates: ``2 pi u du`` over ``u in [0, 12]`` and twice the
    integral over ``v >= 0`` up to a height beyond which the density is below
    ``exp(-46)`` of its peak.  Both conventions scale exactly with ``eps t``,
    so one evaluation per ``(alpha, convention)`` suffices.
    """
    x, w = _legendre(order)
    edges = np.linspace(0.0, 12.0, panels + 1)
    u = (0.5 * (edges[1:] + edges[:-1])[:, None] + 0.5 * np.diff(edges)[:, None] * x).ravel()
    wu = (0.5 * np.diff(edges)[:, None] * w).ravel()
    zscale = 1.0 if convention == "levy" else 1.0 / (2.0 * alpha)
    vmax = zscale * alpha * (180.0 / np.pi + 4.0 * u * u)
    vs = np.linspace(0.0, 1.0, panels + 1)
    y = (0.5 * (vs[1:] + vs[:-1])[:, None] + 0.5 * np.diff(vs)[:, None] * x).ravel()
    wy = (0.5 * np.diff(vs)[:, None] * w).ravel()
    V = vmax[:, None] * y[None, :]
    logp = log_kernel_offsets((u * u)[:, None] * np.ones_like(y)[None, :], V, 1.0, 1.0,
                              alpha, quad, convention)
    inner = 2.0 * vmax * (np.exp(logp) @ wy)
    return float(np.sum(2.0 * np.pi * u * wu * inner))


def box_capture(rho_max: float, z_max: float, et: float, alpha: float,
                convention: str = "levy") -> float:
    """Fraction of the kernel mass inside ``rho <= rho_max, |z| <= z_max``.

    Uses the exact planar marginal ``exp(-rho^2 / (2 eps t))`` tail and the
    exact vertical marginal (a hyperbolic secant law); the joint tail is
    treated as independent, which is immaterial at the sizes used.
    """
    zeff = z_max if convention == "levy" else 2.0 * alpha * z_max
    p_rho = np.exp(-rho_max * rho_max / (2.0 * et))
    p_z = 1.0 - (4.0 / np.pi) * np.arctan(np.tanh(np.pi * zeff / (8.0 * alpha * et)))
    return float(1.0 - p_rho - p_z + p_rho * p_z)


def total_mass(et: float, alpha: float, convention: str = "levy",
               quad: QuadratureSpec = DEFAULT_QUAD) -> float:
    m1 = unit_mass(alpha, convention, quad)
    return m1 if convention == "levy" else m1 / (et * et)


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def rate_sq(rho2, zabs, alpha, convention="levy"):
    """Squared distance controlling the kernel's exponential decay."""
    z = np.abs(np.asarray(zabs, dtype=float))
    if convention == "literal":
        z = 2.0 * alpha * z
    phi = angle_from_offset(rho2, z, alpha)
    return dist_sq_from_angle(phi, rho2, z, alpha)


@dataclass
class KernelTable:
    """Kernel samples on ``rho_axis x ztilde_axis`` with bilinear lookup.

    Interpolation acts on the residual ``log p + d^2 / (2 eps t)``, which is
    smooth and O(1) for every ``eps``; the exact ``d^2`` is added back at
    lookup time.  ``renorm`` rescales the kernel to unit mass in the box.
    """

    t: float
    epsilon: float
    alpha: float
    rho_axis: np.ndarray
    ztilde_axis: np.ndarray
    log_values: np.ndarray
    renorm: float
    quad: QuadratureSpec = DEFAULT_QUAD
    convention: str = "levy"
    mass: float = 1.0
    table_mass: float = float("nan")
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.rho_axis = np.asarray(self.rho_axis, dtype=float)
        self.ztilde_axis = np.asarray(self.ztilde_axis, dtype=float)
        self.log_values = np.asarray(self.log_values, dtype=float)
        if self.log_values.shape != (self.rho_axis.size, self.ztilde_axis.size):
            raise ValueError("table shape does not match its axes")
        if not np.all(np.isfinite(self.log_values)):
            raise KernelNegativityError("table holds nonpositive kernel values")
        et = self.epsilon * self.t
        d2 = rate_sq((self.rho_axis ** 2)[:, None], self.ztilde_axis[None, :],
                     self.alpha, self.convention)
        self._resid = self.log_values + d2 / (2.0 * et)
        dz = np.diff(self.ztilde_axis)
        self._dz = float(dz[0]) if dz.size else 1.0
        if dz.size and np.max(np.abs(dz - self._dz)) > 1e-9 * self._dz:
            raise ValueError("ztilde_axis must be uniform")

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    @property
    def rho_max(self) -> float:
        return float(self.rho_axis[-1])

    @property
    def ztilde_max(self) -> float:
        return float(self.ztilde_axis[-1])

    def lookup_log(self, rho, zabs, d2=None, renormalized: bool = True) -> np.ndarray:
        """Log kernel at ``(rho, |z~|)`` by bilinear interpolation.

        Points on the axis ``rho = 0`` use the closed form.  Queries outside
        the table are clamped to its edge and counted in ``clamp_count``.
        """
        rho = np.asarray(rho, dtype=float)
        z = np.abs(np.asarray(zabs, dtype=float))
        rho, z = np.broadcast_arrays(rho, z)
        out_of_range = (rho > self.rho_max * (1 + 1e-12)) | (z > self.ztilde_max * (1 + 1e-12))
        n_out = int(np.count_nonzero(out_of_range))
        if n_out:
            self.clamp_count += n_out
            log.warning("kernel table lookup clamped at %d points", n_out)
        rc = np.minimum(rho, self.rho_max)
        zc = np.minimum(z, self.ztilde_max)
        nr = self.rho_axis.size
        i = np.clip(np.searchsorted(self.rho_axis, rc, side="right") - 1, 0, max(nr - 2, 0))
        if nr > 1:
            r0 = self.rho_axis[i]
            r1 = self.rho_axis[i + 1]
            wr = np.clip((rc - r0) / (r1 - r0), 0.0, 1.0)
        else:
            wr = np.zeros_like(rc)
        nz = self.ztilde_axis.size
        fj = zc / self._dz
        j = np.clip(np.floor(fj).astype(np.int64), 0, nz - 2)
        wz = np.clip(fj - j, 0.0, 1.0)
        R = self._resid
        res = ((1 - wr) * ((1 - wz) * R[i, j] + wz * R[i, j + 1])
               + wr * ((1 - wz) * R[i + 1, j] + wz * R[i + 1, j + 1]))
        et = self.epsilon * self.t
        if d2 is None:
            d2 = rate_sq(rho * rho, z, self.alpha, self.convention)
        out = res - d2 / (2.0 * et)
        axis = rho == 0.0
        if np.any(axis):
            A, B, pref = _scaled_args(0.0, z[axis], et, self.alpha, self.convention)
            out = np.array(out, dtype=float, copy=True)
            out[axis] = pref + _LOG_PI2_4 - 2.0 * _logcosh(0.5 * np.pi * B)
        if renormalized:
            out = out + np.log(self.renorm)
        return out

    def lookup(self, rho, zabs, renormalized: bool = True) -> np.ndarray:
        return np.exp(self.lookup_log(rho, zabs, renormalized=renormalized))

    def meta(self) -> dict:
        return {
            "t": self.t,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "rho_axis": self.rho_axis.tolist(),
            "ztilde_axis": self.ztilde_axis.tolist(),
            "renorm": self.renorm,
            "mass": self.mass,
            "table_mass": self.table_mass,
            "convention": self.convention,
            "quadrature": asdict(self.quad),
            "order": "ztilde-fastest",
            "dtype": "f64le",
        }

    def save(self, directory: str) -> None:
        """Write ``meta.json``, ``values.f64le`` and ``log_values.f64le``."""
        os.makedirs(directory, exist_ok=True)
        from .report import dumps_deterministic
        with open(os.path.join(directory, "meta.json"), "w", newline="\n") as fh:
            fh.write(dumps_deterministic(self.meta()))
        self.values.astype("<f8").tofile(os.path.join(directory, "values.f64le"))
        self.log_values.astype("<f8").tofile(os.path.join(directory, "log_values.f64le"))

    @classmethod
    def load(cls, directory: str) -> "KernelTable":
        with open(os.path.join(directory, "meta.json")) as fh:
            meta = json.load(fh)
        rho = np.asarray(meta["rho_axis"], dtype=float)
        zt = np.asarray(meta["ztilde_axis"], dtype=float)
        logv = np.fromfile(os.path.join(directory, "log_values.f64le"), dtype="<f8")
        return cls(t=meta["t"], epsilon=meta["epsilon"], alpha=meta["alpha"],
                   rho_axis=rho, ztilde_axis=zt, log_values=logv.reshape(rho.size, zt.size),
                   renorm=meta["renorm"], quad=QuadratureSpec(**meta["quadrature"]),
                   convention=meta["convention"], mass=meta["mass"],
                   table_mass=meta["table_mass"])


def cylindrical_table_mass(rho_axis, ztilde_axis, values) -> float:
    """Trapezoid integral of tabulated values with weight ``2 pi rho``, both signs of z."""
    inner = 2.0 * np.trapezoid(values, ztilde_axis, axis=1)
    return float(np.trapezoid(2.0 * np.pi * rho_axis * inner, rho_axis))


TABLE_CACHE_SIZE = 64
_table_cache: dict = {}


def tabulate(t: float, epsilon: float, alpha: float, rho_max: float, ztilde_max: float,
             n_rho: int = 256, n_z: int = 256, quad: QuadratureSpec = DEFAULT_QUAD,
             rho_nodes=None, convention: str = "levy", backend=None) -> KernelTable:
    """Tabulate the kernel on ``[0, rho_max] x [0, ztilde_max]``.

    Parameters
    ----------
    rho_nodes : array, optional
        Extra radii merged into the uniform axis, e.g. the exact planar
        distances of a grid so grid lookups need no radial interpolation.
        When given with ``n_rho=0`` only these radii are used.
    """
    _check_positive(t, epsilon, alpha)
    if rho_max <= 0 or ztilde_max <= 0:
        raise ValueError("table extents must be positive")
    if n_z < 8 or (n_rho < 8 and (rho_nodes is None or n_rho != 0)):
        raise ValueError("table resolutions must be >= 8")
    rho = np.linspace(0.0, rho_max, n_rho) if n_rho else np.zeros(0)
    if rho_nodes is not None:
        extra = np.asarray(rho_nodes, dtype=float)
        rho = np.unique(np.concatenate([rho, extra[extra <= rho_max], [0.0, rho_max]]))
    zt = np.linspace(0.0, ztilde_max, n_z)
    et = epsilon * t
    # values depend on (t, eps) only through eps t, so tables are shared
    key = (et, float(alpha), rho.tobytes(), zt.tobytes(), quad, convention, backend)
    logv = _table_cache.get(key)
    if logv is None:
        rho2 = (rho ** 2)[:, None] * np.ones(n_z)[None, :]
        zz = np.ones(rho.size)[:, None] * zt[None, :]
        logv = log_kernel_offsets(rho2, zz, t, epsilon, alpha, quad, convention, backend)
        logv.setflags(write=False)
        if len(_table_cache) >= TABLE_CACHE_SIZE:
            _table_cache.pop(next(iter(_table_cache)))
        _table_cache[key] = logv
    mass = total_mass(et, alpha, convention, quad) * box_capture(rho_max, ztilde_max, et,
                                                                 alpha, convention)
    renorm = 1.0 / mass
    tmass = cylindrical_table_mass(rho, zt, np.exp(logv))
    return KernelTable(t=float(t), epsilon=float(epsilon), alpha=float(alpha), rho_axis=rho,
                       ztilde_axis=zt, log_values=logv, renorm=float(renorm), quad=quad,
                       convention=convention, mass=float(mass), table_mass=tmass)
