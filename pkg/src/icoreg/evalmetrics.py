"""Registration metrics: inlier ratio, feature-matching recall, registration recall, pose error,
and iterations-to-success curves."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray

from .geom import RigidTransform, apply_transform
from .icosa import rotation_angle

FMR_THRESHOLD = 0.05


@dataclass
class PairEvaluation:
    inlier_ratio: float
    registration_correct: bool
    rotation_error: float  # degrees
    translation_error: float
    iterations_to_success: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def correct_mask(p: NDArray, q: NDArray, T_gt: RigidTransform, tau_c: float) -> NDArray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    return np.linalg.norm(apply_transform(T_gt, p) - q, axis=1) <= tau_c


def correspondence_eval(p: NDArray, q: NDArray, T_gt: RigidTransform, tau_c: float) -> float:
    """Fraction of correspondences within ``tau_c`` under the ground truth; 0 for an empty set."""
    m = correct_mask(p, q, T_gt, tau_c)
    return float(m.mean()) if len(m) else 0.0


def fmr(inlier_ratios, threshold: float = FMR_THRESHOLD) -> float:
    """Fraction of pairs whose inlier ratio is strictly above ``threshold``."""
    r = np.asarray(inlier_ratios, dtype=np.float64)
    return float(np.mean(r > threshold)) if len(r) else 0.0


def alignment_distance(T_est: RigidTransform, T_gt: RigidTransform, points: NDArray, use_mean: bool = False) -> float:
    """RMSE (default) or mean of ``|T_est(x) - T_gt(x)|`` over ``points``."""
    d = np.linalg.norm(apply_transform(T_est, points) - apply_transform(T_gt, points), axis=1)
    return float(d.mean()) if use_mean else float(np.sqrt(np.mean(d * d)))


def rr(T_est: RigidTransform, T_gt: RigidTransform, eval_points: NDArray, tau_r: float, use_mean: bool = False) -> bool:
    """Registration is correct when the alignment distance is below ``tau_r``."""
    return alignment_distance(T_est, T_gt, eval_points, use_mean) < tau_r


def pose_error(T_est: RigidTransform, T_gt: RigidTransform) -> tuple[float, float]:
    """(geodesic rotation error in degrees, translation error)."""
    ang = float(np.degrees(rotation_angle(T_est.rotation.T @ T_gt.rotation)))
    return ang, float(np.linalg.norm(T_est.translation - T_gt.translation))


def hypothesis_correct(
    rotations: NDArray, translations: NDArray, T_gt: RigidTransform, eval_points: NDArray, tau_r: float, use_mean=False
) -> NDArray:
    """Vectorized :func:`rr` over a hypothesis stream."""
    X = np.asarray(eval_points, dtype=np.float64)
    gt = apply_transform(T_gt, X)
    out = np.empty(len(rotations), bool)
    for s in range(0, len(rotations), 1024):
        est = np.einsum("kij,nj->kni", rotations[s : s + 1024], X) + translations[s : s + 1024, None, :]
        d = np.linalg.norm(est - gt[None], axis=2)
        dist = d.mean(axis=1) if use_mean else np.sqrt(np.mean(d * d, axis=1))
        out[s : s + 1024] = dist < tau_r
    return out


def iterations_to_success(correct: NDArray) -> int | None:
    """1-based index of the first correct hypothesis, or None."""
    hits = np.flatnonzero(np.asarray(correct))
    return int(hits[0]) + 1 if len(hits) else None


def success_curve(first_success, budgets) -> list[tuple[int, float]]:
    """For each budget ``N``, the fraction of pairs that needed at most ``N`` hypotheses to hit a correct one.

    ``first_success`` holds 1-based :func:`iterations_to_success` values (None = never).
    Equivalently, fewer than ``N`` failed hypotheses preceded the first success.
    """
    firsts = list(first_success)
    n = len(firsts)
    out = []
    for N in budgets:
        k = sum(1 for f in firsts if f is not None and f <= N)
        out.append((int(N), k / n if n else 0.0))
    return out
