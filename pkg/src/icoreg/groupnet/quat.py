"""Scalar-first quaternion helpers (w, x, y, z)."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from ..icosa import quat_to_matrix

__all__ = ["matrix_to_quat", "quat_to_matrix", "quat_angle"]


def matrix_to_quat(R: NDArray) -> NDArray:
    """Unit quaternion with ``w >= 0``."""
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


def quat_angle(q1: NDArray, q2: NDArray) -> NDArray:
    """Geodesic angle between the rotations of two unit quaternions."""
    c = np.abs(np.sum(np.asarray(q1) * np.asarray(q2), axis=-1))
    return 2.0 * np.arccos(np.clip(c, 0.0, 1.0))
