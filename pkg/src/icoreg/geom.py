"""Rigid transforms, Kabsch fitting, point-to-point ICP, voxel downsampling and the planarity filter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .icosa import axis_angle_matrix


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine a rigid transform (collinear or duplicate)."""


def as_points(P) -> NDArray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ValueError("point cloud contains NaN or Inf")
    return P


@dataclass(frozen=True)
class RigidTransform:
    rotation: NDArray = field(default_factory=lambda: np.eye(3))
    translation: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, T: NDArray) -> RigidTransform:
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> NDArray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self after other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, P) -> NDArray:
        return apply_transform(self, P)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.max(np.abs(R.T @ R - np.eye(3))) <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def apply_transform(T: RigidTransform, P) -> NDArray:
    """``q_i = R p_i + t``."""
    P = np.asarray(P, dtype=np.float64)
    return P @ T.rotation.T + T.translation


def kabsch(src, dst, weights=None) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (SVD, reflection-corrected).

    Raises
    ------
    DegenerateGeometryError
        Fewer than 3 pairs, or the source points are collinear / coincident.
    """
    src = as_points(src)
    dst = as_points(dst)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape")
    if len(src) < 3:
        raise DegenerateGeometryError("need at least 3 point pairs")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    A = src - cs
    B = dst - cd
    sv = np.linalg.svd(A * np.sqrt(w)[:, None], compute_uv=False)
    scale = max(sv[0], np.finfo(float).tiny)
    if sv[1] <= 1e-9 * scale or sv[0] <= 1e-12:
        raise DegenerateGeometryError("source points are collinear or coincident")
    H = (A * w[:, None]).T @ B
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def kabsch_batch(src: NDArray, dst: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    """Kabsch over a stack of point sets ``(B, k, 3)``.

    Returns ``(R, t, valid)``; ``valid`` is False where the source set is degenerate.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    A = src - cs
    B = dst - cd
    sv = np.linalg.svd(A, compute_uv=False)
    valid = (sv[:, 1] > 1e-9 * np.maximum(sv[:, 0], 1e-300)) & (sv[:, 0] > 1e-12)
    H = np.einsum("bki,bkj->bij", A, B)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ np.swapaxes(U, 1, 2)
    t = cd[:, 0, :] - np.einsum("bij,bj->bi", R, cs[:, 0, :])
    return R, t, valid


@dataclass
class ICPResult:
    transform: RigidTransform
    rmse: float
    rmse_trace: list[float]
    iterations: int


def icp(
    src,
    dst,
    init: RigidTransform | None = None,
    max_iter: int = 50,
    conv_tol: float = 1e-6,
    max_distance: float | None = None,
) -> ICPResult:
    """Point-to-point ICP with exact nearest-neighbor association.

    ``rmse_trace[k]`` is the association RMSE of the k-th iterate (``rmse_trace[0]``
    is the initial transform). The best iterate is returned, so the result is never
    worse than ``init``. Without ``max_distance`` the trace is non-increasing.
    """
    src = as_points(src)
    dst = as_points(dst)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("ICP requires non-empty clouds")
    T = init if init is not None else RigidTransform.identity()
    tree = cKDTree(dst)

    def associate(T):
        moved = apply_transform(T, src)
        d, j = tree.query(moved)
        keep = np.ones(len(d), bool) if max_distance is None else d <= max_distance
        rmse = float(np.sqrt(np.mean(d[keep] ** 2))) if keep.any() else np.inf
        return rmse, j, keep

    rmse, j, keep = associate(T)
    trace = [rmse]
    best_T, best_rmse = T, rmse
    it = 0
    for it in range(1, max_iter + 1):
        if keep.sum() < 3:
            break
        try:
            T_new = kabsch(src[keep], dst[j[keep]])
        except DegenerateGeometryError:
            break
        rmse_new, j, keep = associate(T_new)
        trace.append(rmse_new)
        improved = rmse - rmse_new
        if rmse_new < best_rmse:
            best_T, best_rmse = T_new, rmse_new
        T, rmse = T_new, rmse_new
        if improved < conv_tol:
            break
    return ICPResult(best_T, best_rmse, trace, it)


def voxel_downsample(P, voxel: float) -> NDArray:
    """Centroid of each occupied voxel, ordered by voxel key."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    P = as_points(P)
    if len(P) == 0:
        return P.copy()
    keys = np.floor(P / voxel).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inv, P)
    counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    return sums / counts[:, None]


def local_min_eigenvalue(P, keypoints, radius: float, tree: cKDTree | None = None) -> NDArray:
    """Smallest covariance eigenvalue of each keypoint's neighborhood, in radius-scaled coordinates.

    NaN where the neighborhood (excluding the keypoint itself) is empty.
    """
    P = as_points(P)
    tree = tree or cKDTree(P)
    keypoints = np.asarray(keypoints, dtype=np.int64)
    out = np.full(len(keypoints), np.nan)
    for n, k in enumerate(keypoints):
        nbr = [i for i in tree.query_ball_point(P[k], radius) if i != k]
        if not nbr:
            continue
        X = (P[nbr] - P[k]) / radius
        X = X - X.mean(axis=0)
        C = X.T @ X / len(X)
        out[n] = np.linalg.eigvalsh(C)[0]
    return out


def planarity_filter(P, keypoints, radius: float, min_eig_threshold: float = 0.03) -> NDArray:
    """Keep keypoints whose scaled neighborhood covariance has smallest eigenvalue >= threshold."""
    keypoints = np.asarray(keypoints, dtype=np.int64)
    lam = local_min_eigenvalue(P, keypoints, radius)
    keep = ~np.isnan(lam) & (lam >= min_eig_threshold)
    return keypoints[keep]


def random_transform(rng_seed, max_angle: float = np.pi, max_translation: float = 0.0) -> RigidTransform:
    """Uniform axis, angle uniform in ``[0, max_angle]``, translation uniform in a cube of half-width ``max_translation``."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    axis = rng.standard_normal(3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.standard_normal(3)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-max_translation, max_translation, size=3)
    R = axis_angle_matrix(axis, angle) if max_angle > 0 else np.eye(3)
    return RigidTransform(R, t)


def rmse_between(T_a: RigidTransform, T_b: RigidTransform, points) -> float:
    """RMSE of ``||T_a(x) - T_b(x)||`` over ``points``."""
    d = apply_transform(T_a, points) - apply_transform(T_b, points)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
