"""Hypothesize-and-verify registration: vanilla 3-point RANSAC, coarse-rotation verification (CRV)
and one-shot estimation (OSE).

The hypothesis stream of every mode is a prefix-stable function of the seed: the first
``k`` hypotheses are the same whatever ``max_iterations`` is. Scoring is a fixed-budget
argmax over ``(inlier_count, -hypothesis_index)``; there is no early exit.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from math import comb

import numpy as np
from numpy.typing import NDArray

from .geom import DegenerateGeometryError, RigidTransform, kabsch, kabsch_batch
from .icosa import IcosahedralGroup, get_group, quantize_rotations

log = logging.getLogger(__name__)

MODES = ("vanilla", "crv", "ose")
_SCORE_CHUNK = 1024


class InsufficientCorrespondencesError(ValueError):
    pass


class CRVFallbackWarning(RuntimeWarning):
    pass


@dataclass
class RansacConfig:
    mode: str = "ose"
    max_iterations: int = 1000
    inlier_threshold: float = 0.1
    seed: int = 0
    refit: bool = True
    distance_check: bool = False
    edge_ratio: float = 0.9

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")


@dataclass
class Correspondences:
    """Array form of a correspondence set.

    ``coarse``: group element index per correspondence; ``refined``: ``(n, 3, 3)``
    rotations, NaN-filled rows where no refined rotation exists.
    """

    p: NDArray
    q: NDArray
    coarse: NDArray | None = None
    refined: NDArray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 3)
        if self.p.shape != self.q.shape:
            raise ValueError("p and q must have matching shapes")
        if self.coarse is not None:
            self.coarse = np.asarray(self.coarse, dtype=np.int64).reshape(-1)
        if self.refined is not None:
            self.refined = np.asarray(self.refined, dtype=np.float64).reshape(-1, 3, 3)

    def __len__(self) -> int:
        return len(self.p)

    @classmethod
    def from_list(cls, C) -> Correspondences:
        if isinstance(C, Correspondences):
            return C
        C = list(C)
        p = np.array([c.p for c in C]).reshape(-1, 3)
        q = np.array([c.q for c in C]).reshape(-1, 3)
        coarse = np.array([c.coarse_rotation for c in C], dtype=np.int64)
        refined = None
        if any(c.refined_rotation is not None for c in C):
            refined = np.full((len(C), 3, 3), np.nan)
            for k, c in enumerate(C):
                if c.refined_rotation is not None:
                    refined[k] = c.refined_rotation
        return cls(p, q, coarse, refined)


@dataclass
class Hypotheses:
    rotations: NDArray  # (k, 3, 3)
    translations: NDArray  # (k, 3)
    valid: NDArray  # (k,) bool
    fallback: bool = False

    def __len__(self) -> int:
        return len(self.valid)

    def transform(self, i: int) -> RigidTransform:
        return RigidTransform(self.rotations[i], self.translations[i])


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inlier_indices: NDArray
    hypotheses_evaluated: int
    seed: int
    best_hypothesis: int = -1
    fallback: bool = False
    mode: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def inlier_count(self) -> int:
        return len(self.inlier_indices)


def count_inliers(T: RigidTransform, C, tau: float) -> NDArray:
    """Indices ``i`` with ``|R p_i + t - q_i| <= tau``."""
    C = Correspondences.from_list(C)
    r = C.p @ T.rotation.T + T.translation - C.q
    return np.flatnonzero(np.sqrt(np.sum(r * r, axis=1)) <= tau)


def _distinct_triplets(u: NDArray, n: int) -> NDArray:
    """Map uniforms ``(k, 3)`` to uniformly random ordered triplets of distinct indices in ``[0, n)``."""
    i = np.minimum((u[:, 0] * n).astype(np.int64), n - 1)
    j = np.minimum((u[:, 1] * (n - 1)).astype(np.int64), n - 2)
    j = j + (j >= i)
    a, b = np.minimum(i, j), np.maximum(i, j)
    k = np.minimum((u[:, 2] * (n - 2)).astype(np.int64), n - 3)
    k = k + (k >= a)
    k = k + (k >= b)
    return np.stack([i, j, k], axis=1)


def _edge_check(P: NDArray, Q: NDArray, ratio: float) -> NDArray:
    ok = np.ones(len(P), bool)
    for a, b in ((0, 1), (1, 2), (0, 2)):
        dp = np.linalg.norm(P[:, a] - P[:, b], axis=1)
        dq = np.linalg.norm(Q[:, a] - Q[:, b], axis=1)
        ok &= np.minimum(dp, dq) >= ratio * np.maximum(dp, dq)
    return ok


def crv_buckets(coarse: NDArray) -> tuple[list[NDArray], NDArray]:
    """Correspondence index lists sharing a coarse rotation (size >= 3) and their C(size, 3) weights."""
    members = [np.flatnonzero(coarse == g) for g in np.unique(coarse)]
    members = [m for m in members if len(m) >= 3]
    weights = np.array([comb(len(m), 3) for m in members], dtype=np.float64)
    return members, weights


def crv_keys(C: Correspondences, group: IcosahedralGroup | None = None) -> NDArray:
    """Bucket key per correspondence: the group element nearest to its rotation estimate.

    With refined rotations this is the cell of the refined rotation (it can differ from
    ``coarse`` when refinement moves across cells); rows without one keep ``coarse``.
    """
    if C.refined is None:
        if C.coarse is None:
            raise ValueError("CRV needs coarse or refined rotations")
        return C.coarse
    return quantize_rotations(_ose_rotations(C, group), group)[0].astype(np.int64)


def triplet_indices(
    C: Correspondences, cfg: RansacConfig, group: IcosahedralGroup | None = None
) -> tuple[NDArray, bool]:
    """Sampled index triplets ``(max_iterations, 3)`` for vanilla / CRV, plus the CRV fallback flag."""
    n = len(C)
    rng = np.random.default_rng(cfg.seed)
    u = rng.random((cfg.max_iterations, 4))
    if cfg.mode == "crv":
        members, weights = crv_buckets(crv_keys(C, group))
        if members:
            cdf = np.cumsum(weights) / weights.sum()
            which = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), len(members) - 1)
            out = np.empty((len(u), 3), dtype=np.int64)
            for b, m in enumerate(members):
                sel = which == b
                if sel.any():
                    out[sel] = m[_distinct_triplets(u[sel, 1:], len(m))]
            return out, False
        msg = "no coarse-rotation bucket has 3 or more correspondences; falling back to vanilla sampling"
        warnings.warn(msg, CRVFallbackWarning, stacklevel=3)
        log.warning(msg)
        return _distinct_triplets(u[:, 1:], n), True
    return _distinct_triplets(u[:, 1:], n), False


def generate_hypotheses(C, cfg: RansacConfig, group: IcosahedralGroup | None = None) -> Hypotheses:
    """The full hypothesis stream for ``cfg`` (length = number of hypotheses evaluated)."""
    C = Correspondences.from_list(C)
    n = len(C)
    if cfg.mode == "ose":
        if n < 1:
            raise InsufficientCorrespondencesError("OSE needs at least one correspondence")
        rots = _ose_rotations(C, group)
        order = np.random.default_rng(cfg.seed).permutation(n)[: min(cfg.max_iterations, n)]
        R = rots[order]
        t = C.q[order] - np.einsum("kij,kj->ki", R, C.p[order])
        return Hypotheses(R, t, np.ones(len(order), bool))
    if n < 3:
        raise InsufficientCorrespondencesError(f"{cfg.mode} needs at least 3 correspondences, got {n}")
    idx, fallback = triplet_indices(C, cfg, group)
    P, Q = C.p[idx], C.q[idx]
    R, t, valid = kabsch_batch(P, Q)
    if cfg.distance_check:
        valid &= _edge_check(P, Q, cfg.edge_ratio)
    return Hypotheses(R, t, valid, fallback)


def _ose_rotations(C: Correspondences, group) -> NDArray:
    if C.coarse is None and C.refined is None:
        raise ValueError("OSE needs per-correspondence rotations")
    group = group or get_group()
    if C.refined is None:
        return group.rotations[C.coarse]
    rots = C.refined.copy()
    missing = np.isnan(rots).any(axis=(1, 2))
    if missing.any():
        if C.coarse is None:
            raise ValueError("refined rotations missing and no coarse fallback")
        rots[missing] = group.rotations[C.coarse[missing]]
    return rots


def score_hypotheses(H: Hypotheses, C: Correspondences, tau: float) -> NDArray:
    """Inlier count per hypothesis; invalid hypotheses score -1."""
    counts = np.full(len(H), -1, dtype=np.int64)
    for s in range(0, len(H), _SCORE_CHUNK):
        sl = slice(s, s + _SCORE_CHUNK)
        moved = np.einsum("kij,nj->kni", H.rotations[sl], C.p) + H.translations[sl, None, :]
        d2 = np.sum((moved - C.q[None]) ** 2, axis=2)
        counts[sl] = np.where(H.valid[sl], np.sum(d2 <= tau * tau, axis=1), -1)
    return counts


def run_ransac(C, cfg: RansacConfig, group: IcosahedralGroup | None = None) -> RegistrationResult:
    """Estimate a rigid transform from correspondences with the configured hypothesis generator.

    Raises
    ------
    InsufficientCorrespondencesError
        Fewer than 3 correspondences (vanilla / CRV) or none (OSE).
    """
    C = Correspondences.from_list(C)
    H = generate_hypotheses(C, cfg, group)
    counts = score_hypotheses(H, C, cfg.inlier_threshold)
    notes = ["crv-fallback-to-vanilla"] if H.fallback else []
    best = int(np.argmax(counts))  # first maximum: earliest hypothesis wins ties
    if counts[best] < 0:
        notes.append("no-valid-hypothesis")
        T = RigidTransform.identity()
    else:
        T = H.transform(best)
    inliers = count_inliers(T, C, cfg.inlier_threshold)
    if cfg.refit and len(inliers) >= 3:
        try:
            T_ref = kabsch(C.p[inliers], C.q[inliers])
            ref_inliers = count_inliers(T_ref, C, cfg.inlier_threshold)
            if len(ref_inliers) >= len(inliers):
                T, inliers = T_ref, ref_inliers
        except DegenerateGeometryError:
            notes.append("refit-degenerate")
    return RegistrationResult(T, inliers, len(H), cfg.seed, best, H.fallback, cfg.mode, notes)
