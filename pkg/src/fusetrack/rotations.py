"""Rotation utilities shared by kinematics, simulation, and filters.

Conventions: rotation matrices are world-from-local (columns = local axes in
the outer frame); quaternions are (w, x, y, z), unit norm.
"""

from __future__ import annotations

import numpy as np


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u). Batched over leading dims."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_matrix(axis: np.ndarray, theta) -> np.ndarray:
    """Rodrigues rotation about a fixed unit axis; theta may be batched."""
    axis = np.asarray(axis, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    k = skew(axis)
    kk = k @ k
    s = np.sin(theta)[..., None, None]
    c = (1.0 - np.cos(theta))[..., None, None]
    return np.eye(3) + s * k + c * kk


def rotvec_to_matrix(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=np.float64)
    theta = np.linalg.norm(rv, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        axis = np.where(theta[..., None] > 1e-12, rv / np.maximum(theta, 1e-300)[..., None], 0.0)
    return axis_angle_matrix(axis, theta)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Log map; handles the near-pi branch via quaternion conversion."""
    q = matrix_to_quat(R)
    return quat_to_rotvec(q)


def euler_zyx_deg_to_matrix(zyx_deg) -> np.ndarray:
    """Intrinsic Rz(z) @ Ry(y) @ Rx(x), angles in degrees."""
    z, y, x = (np.deg2rad(a) for a in zyx_deg)
    cz, sz = np.cos(z), np.sin(z)
    cy, sy = np.cos(y), np.sin(y)
    cx, sx = np.cos(x), np.sin(x)
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return Rz @ Ry @ Rx


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R)
    if R.shape != (3, 3):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() < tol
            and abs(np.linalg.det(R) - 1.0) < tol)


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=np.float64)
    theta = np.linalg.norm(rv, axis=-1)
    half = 0.5 * theta
    # sinc form is stable near zero
    small = theta < 1e-8
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / np.maximum(theta, 1e-300))
    return np.concatenate([np.cos(half)[..., None], k[..., None] * rv], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w = np.clip(q[..., 0], -1.0, 1.0)
    v = q[..., 1:]
    sin_half = np.linalg.norm(v, axis=-1)
    theta = 2.0 * np.arctan2(sin_half, w)
    small = sin_half < 1e-12
    scale = np.where(small, 2.0, theta / np.maximum(sin_half, 1e-300))
    return scale[..., None] * v


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, numerically stable for all quadrants."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    out = np.empty((Rf.shape[0], 4))
    for i, M in enumerate(Rf):
        tr = np.trace(M)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[i] = [0.25 * s,
                      (M[2, 1] - M[1, 2]) / s,
                      (M[0, 2] - M[2, 0]) / s,
                      (M[1, 0] - M[0, 1]) / s]
        elif M[0, 0] > M[1, 1] and M[0, 0] > M[2, 2]:
            s = np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2]) * 2
            out[i] = [(M[2, 1] - M[1, 2]) / s, 0.25 * s,
                      (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s]
        elif M[1, 1] > M[2, 2]:
            s = np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2]) * 2
            out[i] = [(M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s,
                      0.25 * s, (M[1, 2] + M[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1]) * 2
            out[i] = [(M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s,
                      (M[1, 2] + M[2, 1]) / s, 0.25 * s]
    return quat_normalize(out.reshape(batch + (4,)))


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, degrees."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.rad2deg(np.arccos(np.clip(c, -1.0, 1.0))))


# ---------------------------------------------------------------------------
# Spherical linear interpolation with constant world angular velocity
# ---------------------------------------------------------------------------

def slerp_segment(R0: np.ndarray, R1: np.ndarray, u) -> np.ndarray:
    """Interpolate R(u) = exp(u * log(R1 R0^T)) @ R0 for u in [0, 1] (batched u)."""
    rv = matrix_to_rotvec(R1 @ R0.T)
    u = np.asarray(u, dtype=np.float64)
    return rotvec_to_matrix(u[..., None] * rv) @ R0


def slerp_angular_velocity(R0: np.ndarray, R1: np.ndarray, duration: float) -> np.ndarray:
    """World-frame angular velocity of the slerp path; constant over the segment."""
    return matrix_to_rotvec(R1 @ R0.T) / duration
