"""Mutual nearest-neighbor descriptor matching and per-correspondence rotation estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .geom import RigidTransform, icp
from .groupnet.network import NetworkWeights, regress_residual, regressor_input
from .groupnet.quat import quat_to_matrix
from .icosa import ORDER, IcosahedralGroup, get_group


# multi-start geometric refinement: starts screened on a subsample with a short ICP
GEOMETRIC_STARTS = 5
SCREEN_POINTS = 150
SCREEN_ITER = 10


class MissingRegressorError(ValueError):
    pass


@dataclass
class Correspondence:
    p_index: int
    q_index: int
    p: NDArray
    q: NDArray
    desc_dist: float
    coarse_rotation: int = 0
    refined_rotation: NDArray | None = None


def mutual_nn_pairs(desc_p: NDArray, desc_q: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    """Index arrays ``(i, j, dist)`` of mutual nearest neighbors (L2), sorted by ``i``."""
    desc_p = np.atleast_2d(np.asarray(desc_p, dtype=np.float64))
    desc_q = np.atleast_2d(np.asarray(desc_q, dtype=np.float64))
    if len(desc_p) == 0 or len(desc_q) == 0:
        raise ValueError("empty descriptor set")
    d_pq, j = cKDTree(desc_q).query(desc_p)
    _, i_back = cKDTree(desc_p).query(desc_q)
    i = np.arange(len(desc_p))
    keep = i_back[j] == i
    return i[keep], j[keep], d_pq[keep]


def match_mutual_nn(desc_p: NDArray, desc_q: NDArray, points_p: NDArray, points_q: NDArray) -> list[Correspondence]:
    """Mutual nearest-neighbor correspondences between two descriptor sets."""
    i, j, d = mutual_nn_pairs(desc_p, desc_q)
    return [
        Correspondence(int(a), int(b), np.asarray(points_p[a], float), np.asarray(points_q[b], float), float(dd))
        for a, b, dd in zip(i, j, d)
    ]


def alignment_distances(f_p: NDArray, f_q: NDArray, group: IcosahedralGroup | None = None) -> NDArray:
    """``||f_q - P_g f_p||`` for every ``g``; batched over leading axes -> ``(..., 60)``."""
    group = group or get_group()
    f_p = np.asarray(f_p, dtype=np.float64)
    f_q = np.asarray(f_q, dtype=np.float64)
    if f_p.shape != f_q.shape or f_p.shape[-2] != ORDER:
        raise ValueError(f"group feature shapes differ or are not 60-row: {f_p.shape} vs {f_q.shape}")
    perms = f_p[..., group.cayley.T, :]  # (..., g, row, c)
    diff = f_q[..., None, :, :] - perms
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


def coarse_rotation(f_p: NDArray, f_q: NDArray, group: IcosahedralGroup | None = None):
    """Group element whose row permutation best aligns ``f_p`` to ``f_q``; lowest index on ties.

    Accepts single ``(60, n)`` features (returns an int) or stacks (returns an int array).
    """
    d = alignment_distances(f_p, f_q, group)
    g = np.argmin(d, axis=-1)
    return int(g) if np.ndim(g) == 0 else g.astype(np.int64)


def refine_rotation(f0_p, fl_p, f0_q, fl_q, coarse, weights: NetworkWeights | None, group=None) -> NDArray:
    """``R_eps @ R_coarse`` with ``R_eps`` from the regressor. Batched over leading axes.

    Raises
    ------
    MissingRegressorError
        If ``weights`` has no regressor; callers fall back to the coarse rotation.
    """
    group = group or get_group()
    if weights is None or weights.regressor is None:
        raise MissingRegressorError("no regressor weights available")
    coarse = np.asarray(coarse)
    if coarse.ndim == 0:
        X = regressor_input(f0_p, fl_p, f0_q, fl_q, int(coarse), group)
    else:
        X = np.stack(
            [regressor_input(f0_p[k], fl_p[k], f0_q[k], fl_q[k], int(c), group) for k, c in enumerate(coarse)]
        )
    q = regress_residual(X, weights.regressor, group)
    return quat_to_matrix(q) @ group.rotations[coarse]


def refine_rotation_geometric(
    patch_p: NDArray, patch_q: NDArray, coarse_R: NDArray, max_iter: int = 30, max_distance: float | None = None
) -> NDArray:
    """Regressor-free refinement: point-to-point ICP of the centered patch ``p`` onto patch ``q`` from ``coarse_R``.

    ``coarse_R`` may be a stack ``(k, 3, 3)`` of starting rotations (see :func:`candidate_rotations`).
    Each start is screened with a short ICP on a strided subsample of ``p`` of about
    ``SCREEN_POINTS`` points; the full ICP then continues from the lowest-RMSE start.
    """
    patch_p = np.asarray(patch_p, dtype=np.float64)
    starts = np.asarray(coarse_R, dtype=np.float64).reshape(-1, 3, 3)
    init = RigidTransform(starts[0], np.zeros(3))
    if len(starts) > 1:
        sub = patch_p[:: max(1, len(patch_p) // SCREEN_POINTS)]
        screened = [icp(sub, patch_q, RigidTransform(R, np.zeros(3)), max_iter=SCREEN_ITER, max_distance=max_distance)
                    for R in starts]  # fmt: skip
        init = min(screened, key=lambda r: r.rmse).transform  # first start wins ties
    res = icp(patch_p, patch_q, init, max_iter=max_iter, max_distance=max_distance)
    return res.transform.rotation


def candidate_rotations(f_p: NDArray, f_q: NDArray, k: int, group: IcosahedralGroup | None = None) -> NDArray:
    """The ``k`` group elements with the smallest alignment distance, best first (lowest index on ties)."""
    group = group or get_group()
    d = alignment_distances(f_p, f_q, group)
    return np.argsort(d, axis=-1, kind="stable")[..., :k]
