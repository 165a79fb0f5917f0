"""Heisenberg-type group law, horizontal frames and diffusion tensors.

The group is R^3 with the twisted product

    (x, y, z) . (x', y', z') = (x + x', y + y', z + z' + 2 a (x y' - y x'))

where ``a`` is the bracket strength.  Three frame kinds are supported: the
Heisenberg frame (rank 2, bracket generating), a constant planar frame whose
third row vanishes, and the isotropic identity frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

FRAME_KINDS = ("heisenberg", "planar_constant", "isotropic")

# finite-difference step for the self-test oracles
FD_STEP = 1e-5


@dataclass(frozen=True)
class GroupPoint:
    """A state ``(x, y, z)`` of the group."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.z])):
            raise ValueError("group point coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "GroupPoint":
        a = np.asarray(arr, dtype=float).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))


IDENTITY = GroupPoint(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class FrameParams:
    alpha: float = 0.25
    frame_kind: str = "heisenberg"

    def __post_init__(self):
        if self.frame_kind not in FRAME_KINDS:
            raise ValueError(f"unknown frame kind {self.frame_kind!r}")
        if self.frame_kind == "heisenberg" and not self.alpha > 0:
            raise ValueError("alpha must be positive for the heisenberg frame")


@dataclass(frozen=True)
class HorizontalFrame:
    params: FrameParams

    @property
    def m(self) -> int:
        return 3 if self.params.frame_kind == "isotropic" else 2

    @property
    def kind(self) -> str:
        return self.params.frame_kind

    @property
    def alpha(self) -> float:
        return self.params.alpha


def make_frame(kind: str = "heisenberg", alpha: float = 0.25) -> HorizontalFrame:
    return HorizontalFrame(FrameParams(alpha=alpha, frame_kind=kind))


def group_mul(p: GroupPoint, q: GroupPoint, alpha: float) -> GroupPoint:
    return GroupPoint(
        p.x + q.x,
        p.y + q.y,
        p.z + q.z + 2.0 * alpha * (p.x * q.y - p.y * q.x),
    )


def group_inv(p: GroupPoint) -> GroupPoint:
    return GroupPoint(-p.x, -p.y, -p.z)


def group_mul_arrays(p: np.ndarray, q: np.ndarray, alpha: float) -> np.ndarray:
    """Vectorised group product on arrays of shape ``(..., 3)``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    out = p + q
    out[..., 2] += 2.0 * alpha * (p[..., 0] * q[..., 1] - p[..., 1] * q[..., 0])
    return out


def twisted_offset(q0, q1, alpha: float) -> np.ndarray:
    """Return ``q0^{-1} . q1`` as ``(dx, dy, z~)`` for array inputs."""
    q0 = np.asarray(q0, dtype=float)
    return group_mul_arrays(-q0, q1, alpha)


def frame_at(frame: HorizontalFrame, p: GroupPoint) -> np.ndarray:
    """Frame matrix ``g(p)`` of shape ``(3, m)``."""
    kind = frame.kind
    if kind == "isotropic":
        return np.eye(3)
    g = np.zeros((3, 2))
    g[0, 0] = 1.0
    g[1, 1] = 1.0
    if kind == "heisenberg":
        a = frame.alpha
        g[2, 0] = -2.0 * a * p.y
        g[2, 1] = 2.0 * a * p.x
    return g


def frame_arrays(frame: HorizontalFrame, pts: np.ndarray) -> np.ndarray:
    """Frame matrices for points of shape ``(n, 3)``, returned as ``(n, 3, m)``."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if frame.kind == "isotropic":
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    g = np.zeros((n, 3, 2))
    g[:, 0, 0] = 1.0
    g[:, 1, 1] = 1.0
    if frame.kind == "heisenberg":
        a = frame.alpha
        g[:, 2, 0] = -2.0 * a * pts[:, 1]
        g[:, 2, 1] = 2.0 * a * pts[:, 0]
    return g


def diffusion_tensor(frame: HorizontalFrame, p: GroupPoint) -> np.ndarray:
    g = frame_at(frame, p)
    return g @ g.T


def stratonovich_drift(frame: HorizontalFrame, p: GroupPoint, epsilon: float) -> np.ndarray:
    """Ito correction ``(eps/2) sum_i (D g_i) g_i``.

    Every supported kind gives zero: the only non-constant entries of the
    Heisenberg frame are ``-2a y`` in column 1 and ``2a x`` in column 2, and
    column 1 has no y-component while column 2 has no x-component.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    return np.zeros(3)


def covariant_self_derivative(field: Callable[[np.ndarray], np.ndarray],
                              p: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Directional derivative of a vector field along itself, by central differences."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(field(p), dtype=float)
    return (np.asarray(field(p + h * v)) - np.asarray(field(p - h * v))) / (2.0 * h)


def _jacobian_fd(field, p, h=FD_STEP):
    p = np.asarray(p, dtype=float)
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        cols.append((np.asarray(field(p + e)) - np.asarray(field(p - e))) / (2.0 * h))
    return np.stack(cols, axis=1)


def lie_bracket_check(frame: HorizontalFrame, p: GroupPoint) -> np.ndarray:
    """Numerical ``[g1, g2](p)`` from finite-difference Jacobians (self-test only)."""
    if frame.kind != "heisenberg":
        raise ValueError("lie_bracket_check requires the heisenberg frame")

    def g1(v):
        return frame_at(frame, GroupPoint.from_array(v))[:, 0]

    def g2(v):
        return frame_at(frame, GroupPoint.from_array(v))[:, 1]

    x = p.as_array()
    return _jacobian_fd(g2, x) @ g1(x) - _jacobian_fd(g1, x) @ g2(x)
