"""Sub-Riemannian distance, Hopf-Lax value function and a discrete OT oracle.

The squared distance from the identity to ``(dx, dy, z)`` is written through
an angle ``phi`` in ``[0, pi)`` solving

    |z| / rho^2 = c * G(phi),   G(phi) = (phi - sin(phi) cos(phi)) / sin(phi)^2,

with ``rho^2 = dx^2 + dy^2``.  Then ``d^2 = rho^2 phi^2 / sin(phi)^2``, or in the
form that stays finite on the vertical axis,
``d^2 = phi^2 |z| / (c (phi - sin(phi) cos(phi)))``.

Two values of ``c`` are exposed.  ``convention="geodesic"`` uses ``c = a`` and
is the one satisfied by the heat kernel (Varadhan limit) and by the
isoperimetric argument; it gives ``d^2 = pi |z| / a`` on the vertical axis.
``convention="literal"`` uses ``c = 1 / (2a)`` and gives ``2 pi a |z|`` there.
Both agree for planar displacements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import GroupPoint

CONVENTIONS = ("geodesic", "literal")
_HALF_PI = 0.5 * np.pi


@dataclass(frozen=True)
class DistanceQuery:
    q1: GroupPoint
    q2: GroupPoint
    alpha: float = 0.25


def _num_small(phi):
    # phi - sin(phi) cos(phi) = (x - sin x) / 2 with x = 2 phi, by series
    x = 2.0 * phi
    x2 = x * x
    s = x * x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0 * (1.0 - x2 / 72.0 * (1.0 - x2 / 110.0))))
    return 0.5 * s


def angle_num(phi):
    """``phi - sin(phi) cos(phi)`` without cancellation near 0."""
    phi = np.asarray(phi, dtype=float)
    return np.where(phi < 0.1, _num_small(phi), phi - 0.5 * np.sin(2.0 * phi))


def gfun(phi):
    """``G(phi)`` on ``[0, pi)``; increasing from 0 to infinity."""
    phi = np.asarray(phi, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sin(phi)
        g = angle_num(phi) / (s * s)
        g = np.where(phi > _HALF_PI, _h_delta(np.pi - phi), g)
    return np.where(phi < 1e-8, 2.0 * phi / 3.0, g)


def _h_delta(d):
    # G(pi - d) written in d, accurate as d -> 0
    s = np.sin(d)
    return (np.pi - d + s * np.cos(d)) / (s * s)


def _safe_newton(f, df, target, a, b, increasing, iters):
    """Bracketed Newton: steps leaving ``[a, b]`` fall back to bisection."""
    x = 0.5 * (a + b)
    active = np.ones(x.shape, dtype=bool)
    for _ in range(iters):
        fx = f(x)
        step = (fx - target) / df(x, fx)
        xn = x - step
        bad = ~((xn >= a) & (xn <= b)) | ~np.isfinite(xn)
        xn = np.where(bad, 0.5 * (a + b), xn)
        fn = f(xn)
        low = (fn < target) if increasing else (fn > target)
        a = np.where(active & low, xn, a)
        b = np.where(active & ~low, xn, b)
        conv = np.abs(xn - x) <= 4e-16 * np.abs(xn)
        x = np.where(active, xn, x)
        active &= ~conv
        if not np.any(active):
            break
    return x


def solve_angle(r, bisect_tol: float = 1e-6, newton_iters: int = 60):
    """Invert ``G``: return ``phi`` in ``[0, pi]`` with ``G(phi) = r``.

    ``r = inf`` maps to ``pi``.  Bisection narrows the bracket to
    ``bisect_tol``; safeguarded Newton then polishes to full precision.
    """
    r = np.asarray(r, dtype=float)
    scalar = r.ndim == 0
    r = np.atleast_1d(r).astype(float)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("ratio must be nonnegative")
    out = np.empty_like(r)
    gmid = _HALF_PI  # G(pi/2)

    lo_mask = r <= gmid
    tiny = lo_mask & (r < 1e-9)
    out[tiny] = 1.5 * r[tiny]
    m = lo_mask & ~tiny
    if np.any(m):
        rr = r[m]
        a = np.zeros_like(rr)
        b = np.full_like(rr, _HALF_PI)
        for _ in range(200):
            c = 0.5 * (a + b)
            up = gfun(c) < rr
            a = np.where(up, c, a)
            b = np.where(up, b, c)
            if np.all(b - a <= bisect_tol * b):
                break
        x = _safe_newton(gfun, lambda x, g: 2.0 * (1.0 - g / np.tan(x)), rr, a, b,
                         True, newton_iters)
        out[m] = x

    hi = ~lo_mask
    inf_mask = hi & np.isinf(r)
    out[inf_mask] = np.pi
    m = hi & ~inf_mask
    if np.any(m):
        rr = r[m]
        # H(d) = G(pi - d) is decreasing in d on (0, pi/2]
        a = np.zeros_like(rr)
        b = np.full_like(rr, _HALF_PI)
        for _ in range(200):
            c = 0.5 * (a + b)
            with np.errstate(divide="ignore"):
                big = _h_delta(c) > rr
            a = np.where(big, c, a)
            b = np.where(big, b, c)
            if np.all(b - a <= bisect_tol * b):
                break
        d = _safe_newton(_h_delta, lambda d, h: -2.0 * (1.0 + h / np.tan(d)), rr, a, b,
                         False, newton_iters)
        out[m] = np.pi - d
    return float(out[0]) if scalar else out


def angle_from_offset(rho2, zabs, c):
    """Angle ``phi`` for planar radius squared ``rho2`` and vertical ``zabs``."""
    rho2 = np.asarray(rho2, dtype=float)
    zabs = np.abs(np.asarray(zabs, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(zabs == 0.0, 0.0, zabs / (c * rho2))
    r = np.where(np.isnan(r), 0.0, r)
    return solve_angle(r)


def rhs_theta(theta, alpha: float):
    """Right-hand side ``(1/(2a)) G(2 a theta)`` of the angle equation."""
    return gfun(2.0 * alpha * np.asarray(theta, dtype=float)) / (2.0 * alpha)


def theta_c(ratio, alpha: float):
    """Root of ``ratio = (1/(2a)) G(2 a theta)`` on ``[0, pi/(2a))``.

    Examples
    --------
    >>> round(theta_c(1e-4, 0.25) / 1.5e-4, 6)
    1.0
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    phi = solve_angle(2.0 * alpha * np.asarray(ratio, dtype=float))
    return phi / (2.0 * alpha)


def _const(alpha: float, convention: str) -> float:
    if convention == "geodesic":
        return alpha
    if convention == "literal":
        return 1.0 / (2.0 * alpha)
    raise ValueError(f"unknown convention {convention!r}")


def dist_sq_from_angle(phi, rho2, zabs, c):
    """Squared distance from the solved angle, stable on both ends of ``[0, pi]``."""
    phi = np.asarray(phi, dtype=float)
    rho2 = np.asarray(rho2, dtype=float)
    zabs = np.abs(np.asarray(zabs, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sin(phi)
        ratio = np.where(phi < 1e-8, 1.0, phi / s)
        planar = rho2 * ratio * ratio
        d = np.pi - phi
        num = np.where(phi > _HALF_PI, np.pi - d + np.sin(d) * np.cos(d), angle_num(phi))
        vertical = phi * phi * zabs / (c * num)
    return np.where(phi <= _HALF_PI, planar, vertical)


def distance_sq_offset(dx, dy, dz, alpha: float, convention: str = "geodesic"):
    """Squared distance from the identity to the (already twisted) offset."""
    c = _const(alpha, convention)
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    rho2 = dx * dx + dy * dy
    zabs = np.abs(np.asarray(dz, dtype=float))
    phi = angle_from_offset(rho2, zabs, c)
    return dist_sq_from_angle(phi, rho2, zabs, c)


def twist_dz(q1, q2, alpha: float):
    """Vertical component of ``q1^{-1} q2``."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    return q2[..., 2] - q1[..., 2] - 2.0 * alpha * (q1[..., 0] * q2[..., 1] - q1[..., 1] * q2[..., 0])


def distance_sq_points(q1, q2, alpha: float, convention: str = "geodesic"):
    """Vectorised squared distance between point arrays of shape ``(..., 3)``."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    dx = q2[..., 0] - q1[..., 0]
    dy = q2[..., 1] - q1[..., 1]
    return distance_sq_offset(dx, dy, twist_dz(q1, q2, alpha), alpha, convention)


def sr_distance_sq(query, q2=None, alpha=None, convention: str = "geodesic") -> float:
    """Squared sub-Riemannian distance.

    Accepts either a :class:`DistanceQuery` or ``(q1, q2, alpha)``.
    """
    if isinstance(query, DistanceQuery):
        q1, q2, alpha = query.q1, query.q2, query.alpha
    else:
        q1 = query
    a1 = q1.as_array() if isinstance(q1, GroupPoint) else np.asarray(q1, float)
    a2 = q2.as_array() if isinstance(q2, GroupPoint) else np.asarray(q2, float)
    return float(distance_sq_points(a1, a2, alpha, convention))


def vertical_constants(alpha: float) -> dict:
    """``d^2(0, (0,0,z)) / |z|`` under both conventions."""
    return {"geodesic": np.pi / alpha, "literal": 2.0 * np.pi * alpha}


def hopf_lax(Phi_f, t: float, q, alpha: float, t_f: float = 1.0,
             convention: str = "geodesic") -> float:
    """Grid inf-convolution ``min_j Phi_f(q_j) + d^2(q, q_j) / (2 (t_f - t))``.

    ``Phi_f`` is a :class:`~srbridge.discretization.ScalarField` (or any object
    with ``grid`` and ``values``).
    """
    if not t < t_f:
        raise ValueError("t must be smaller than t_f")
    pts = Phi_f.grid.points()
    qa = q.as_array() if isinstance(q, GroupPoint) else np.asarray(q, float)
    d2 = distance_sq_points(qa[None, :], pts, alpha, convention)
    return float(np.min(np.asarray(Phi_f.values) + d2 / (2.0 * (t_f - t))))


def systematic_resample(weights: np.ndarray, n: int, offset: float = 0.5) -> np.ndarray:
    """Indices of ``n`` equal-mass points by systematic resampling."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be nonnegative with positive sum")
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    u = (np.arange(n) + offset) / n
    return np.minimum(np.searchsorted(cdf, u, side="left"), w.size - 1)


def discrete_ot_oracle(rho_0, rho_f, n_support: int = 400, alpha: float = 0.25,
                       convention: str = "geodesic") -> float:
    """Exact OT cost between equal-mass subsamples with cost ``d^2 / 2``."""
    if n_support > 400 or n_support < 1:
        raise ValueError("n_support must be in [1, 400]")
    pts0 = rho_0.grid.points()[systematic_resample(rho_0.values, n_support)]
    pts1 = rho_f.grid.points()[systematic_resample(rho_f.values, n_support)]
    cost = 0.5 * distance_sq_points(pts0[:, None, :], pts1[None, :, :], alpha, convention)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()) / n_support
