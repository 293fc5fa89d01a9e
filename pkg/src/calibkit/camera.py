"""Pinhole projection and the analytic pixel/state Jacobian."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import Transform, euler_to_rotation, rot_x, rot_y, rot_z

Z_MIN = 1e-6


class BehindCameraError(ValueError):
    """Raised when a point does not lie in front of the camera."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def chain_point(T_init: Transform, x, p_r) -> np.ndarray:
    """Camera-frame position of a base-frame point.

    ``R_init (R(x) p_r + t(x)) + t_init``; accepts ``(3,)`` or ``(N, 3)``.
    """
    x = np.asarray(x, dtype=float)
    R = euler_to_rotation(x[:3])
    p = np.asarray(p_r, dtype=float)
    return (p @ R.T + x[3:]) @ T_init.rotation.T + T_init.translation


def project(k: CameraIntrinsics, p_c, z_min: float = Z_MIN) -> np.ndarray:
    """Pixel ``(u, v)`` of a camera-frame point, or ``(N, 2)`` for ``(N, 3)``."""
    p = np.asarray(p_c, dtype=float)
    z = p[..., 2]
    if np.any(z <= z_min):
        raise BehindCameraError(f"point depth {np.min(z):.3g} m is not above z_min={z_min}")
    return np.stack([k.fx * p[..., 0] / z + k.cx, k.fy * p[..., 1] / z + k.cy], axis=-1)


def _dRz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def jacobian_state(T_init: Transform, x, p_r) -> np.ndarray:
    """3x6 derivative of :func:`chain_point` with respect to the state.

    Translation columns are ``R_init``; each rotation column is the
    initial rotation times the derivative of one elementary rotation
    applied to the partially rotated point.
    """
    x = np.asarray(x, dtype=float)
    a, b, g = x[:3]
    t_r = np.asarray(p_r, dtype=float)
    Rc = T_init.rotation
    Rz, Ry, Rx = rot_z(a), rot_y(b), rot_x(g)

    bx, by, _ = Ry @ Rx @ t_r
    c_alpha = np.array([-bx * np.sin(a) - by * np.cos(a), bx * np.cos(a) - by * np.sin(a), 0.0])
    bx, _, bz = Rx @ t_r
    c_beta = np.array([-bx * np.sin(b) + bz * np.cos(b), 0.0, -bx * np.cos(b) - bz * np.sin(b)])
    _, by, bz = t_r
    c_gamma = np.array([0.0, -by * np.sin(g) - bz * np.cos(g), by * np.cos(g) - bz * np.sin(g)])

    H = np.empty((3, 6))
    H[:, 0] = Rc @ c_alpha
    H[:, 1] = Rc @ Rz @ c_beta
    H[:, 2] = Rc @ Rz @ Ry @ c_gamma
    H[:, 3:] = Rc
    return H


def jacobian_projection(k: CameraIntrinsics, p_c, z_min: float = Z_MIN) -> np.ndarray:
    x, y, z = np.asarray(p_c, dtype=float)
    if z <= z_min:
        raise BehindCameraError(f"point depth {z:.3g} m is not above z_min={z_min}")
    return np.array(
        [
            [k.fx / z, 0.0, -k.fx * x / (z * z)],
            [0.0, k.fy / z, -k.fy * y / (z * z)],
        ]
    )


def measurement_jacobian(T_init: Transform, x, p_r, k: CameraIntrinsics, z_min: float = Z_MIN) -> np.ndarray:
    p_c = chain_point(T_init, x, p_r)
    return jacobian_projection(k, p_c, z_min) @ jacobian_state(T_init, x, p_r)


def predict_batch(T_init: Transform, x, points_r, k: CameraIntrinsics):
    """Camera points, pixels and 2x6 Jacobians for many base-frame points at once.

    Returns ``(p_c (N,3), pixels (N,2), H (N,2,6))``. Depth is not checked;
    callers filter on ``p_c[:, 2]``.
    """
    x = np.asarray(x, dtype=float)
    P = np.asarray(points_r, dtype=float).reshape(-1, 3)
    a, b, g = x[:3]
    Rc = T_init.rotation
    Rz, Ry, Rx = rot_z(a), rot_y(b), rot_x(g)
    R = Rz @ Ry @ Rx
    p_c = (P @ R.T + x[3:]) @ Rc.T + T_init.translation

    # derivative of the rotated point with respect to each Euler angle
    d_alpha = P @ (_dRz(a) @ Ry @ Rx).T
    dRy = np.array([[-np.sin(b), 0.0, np.cos(b)], [0.0, 0.0, 0.0], [-np.cos(b), 0.0, -np.sin(b)]])
    d_beta = P @ (Rz @ dRy @ Rx).T
    dRx = np.array([[0.0, 0.0, 0.0], [0.0, -np.sin(g), -np.cos(g)], [0.0, np.cos(g), -np.sin(g)]])
    d_gamma = P @ (Rz @ Ry @ dRx).T
    Hc = np.empty((P.shape[0], 3, 6))
    Hc[:, :, 0] = d_alpha @ Rc.T
    Hc[:, :, 1] = d_beta @ Rc.T
    Hc[:, :, 2] = d_gamma @ Rc.T
    Hc[:, :, 3:] = Rc

    z = p_c[:, 2]
    safe_z = np.where(np.abs(z) > Z_MIN, z, np.nan)
    u = k.fx * p_c[:, 0] / safe_z + k.cx
    v = k.fy * p_c[:, 1] / safe_z + k.cy
    Hobs = np.zeros((P.shape[0], 2, 3))
    Hobs[:, 0, 0] = k.fx / safe_z
    Hobs[:, 0, 2] = -k.fx * p_c[:, 0] / safe_z**2
    Hobs[:, 1, 1] = k.fy / safe_z
    Hobs[:, 1, 2] = -k.fy * p_c[:, 1] / safe_z**2
    return p_c, np.column_stack([u, v]), Hobs @ Hc


@njit(cache=True)
def point_model(x, Rc, tc, fx, fy, cx, cy, p, out_H):
    """Compiled single-point version of :func:`predict_batch`.

    Writes the 2x6 Jacobian into ``out_H`` and returns ``(z, u, v)``; the
    pixel and Jacobian are undefined when ``z <= Z_MIN``.
    """
    ca, sa = np.cos(x[0]), np.sin(x[0])
    cb, sb = np.cos(x[1]), np.sin(x[1])
    cg, sg = np.cos(x[2]), np.sin(x[2])
    px, py, pz = p[0], p[1], p[2]
    # Rx p and Ry Rx p
    rx1 = cg * py - sg * pz
    rx2 = sg * py + cg * pz
    ry0 = cb * px + sb * rx2
    ry2 = -sb * px + cb * rx2
    # rotated point R p = Rz Ry Rx p
    q0 = ca * ry0 - sa * rx1
    q1 = sa * ry0 + ca * rx1
    q2 = ry2
    d = np.empty((3, 3))
    # d/dalpha
    d[0, 0] = -sa * ry0 - ca * rx1
    d[1, 0] = ca * ry0 - sa * rx1
    d[2, 0] = 0.0
    # d/dbeta: Rz (dRy Rx p)
    b0 = -sb * px + cb * rx2
    b2 = -cb * px - sb * rx2
    d[0, 1] = ca * b0
    d[1, 1] = sa * b0
    d[2, 1] = b2
    # d/dgamma: Rz Ry (dRx p)
    g1 = -sg * py - cg * pz
    g2 = cg * py - sg * pz
    e0 = sb * g2
    e2 = cb * g2
    d[0, 2] = ca * e0 - sa * g1
    d[1, 2] = sa * e0 + ca * g1
    d[2, 2] = e2
    w0 = q0 + x[3]
    w1 = q1 + x[4]
    w2 = q2 + x[5]
    pc = np.empty(3)
    for r in range(3):
        pc[r] = Rc[r, 0] * w0 + Rc[r, 1] * w1 + Rc[r, 2] * w2 + tc[r]
    z = pc[2]
    if not z > Z_MIN:
        return z, np.nan, np.nan
    u = fx * pc[0] / z + cx
    v = fy * pc[1] / z + cy
    a00 = fx / z
    a02 = -fx * pc[0] / (z * z)
    a11 = fy / z
    a12 = -fy * pc[1] / (z * z)
    for c in range(6):
        h0 = 0.0
        h1 = 0.0
        h2 = 0.0
        for r in range(3):
            col = d[r, c] if c < 3 else (1.0 if r == c - 3 else 0.0)
            h0 += Rc[0, r] * col
            h1 += Rc[1, r] * col
            h2 += Rc[2, r] * col
        out_H[0, c] = a00 * h0 + a02 * h2
        out_H[1, c] = a11 * h1 + a12 * h2
    return z, u, v
