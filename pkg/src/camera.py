"""Scaled orthographic projection and rotation parameterisations.

Camera frame: x right, y down, z into the scene (smaller z is nearer).
Image origin sits at the centre of the top-left pixel.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from src.errors import InvalidArgumentError
from src.models import Pose

# Below this angle the exponential-map derivative falls back to its limit.
SMALL_ANGLE = 1e-7


def sop(vertices: np.ndarray, pose: Pose) -> np.ndarray:
    """Project 3D point(s) with s * [R]_{1..2} v + s * t.

    Accepts a single 3-vector or an (M, 3) array.
    """
    v = np.asarray(vertices, dtype=np.float64)
    return pose.scale * (v @ pose.rotation[:2].T + pose.translation)


def camera_depth(vertices: np.ndarray, pose: Pose) -> np.ndarray:
    """Camera-aligned z (model units) of point(s) under the pose rotation."""
    return np.asarray(vertices, dtype=np.float64) @ pose.rotation[2]


def axis_angle_to_matrix(r: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(r, dtype=np.float64).reshape(3)).as_matrix()


def matrix_to_axis_angle(rotation: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Inverse of axis_angle_to_matrix; result has norm in [0, pi]."""
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise InvalidArgumentError(f"expected a 3x3 matrix, got shape {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1) > tol:
        raise InvalidArgumentError("matrix is not a proper rotation")
    return Rotation.from_matrix(r).as_rotvec()


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_derivatives(r: np.ndarray) -> np.ndarray:
    """dR/dr_k for k = 0..2, stacked as a (3, 3, 3) array.

    Uses the compact exponential-map derivative
    dR/dr_k = (r_k [r]x + [r x (I - R) e_k]x) R / |r|^2.
    """
    r = np.asarray(r, dtype=np.float64).reshape(3)
    theta2 = float(r @ r)
    basis = np.eye(3)
    if theta2 < SMALL_ANGLE**2:
        return np.stack([skew(basis[k]) for k in range(3)])

    rot = axis_angle_to_matrix(r)
    r_hat = skew(r)
    out = np.empty((3, 3, 3))
    for k in range(3):
        col = np.cross(r, (np.eye(3) - rot) @ basis[k])
        out[k] = (r[k] * r_hat + skew(col)) @ rot / theta2
    return out


def yaw_rotation(degrees: float) -> np.ndarray:
    """Rotation about the vertical (y) axis."""
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
