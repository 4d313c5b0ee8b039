"""Matched keypoint patch pairs cut from synthetic scene pairs, for training and matching benchmarks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from ..backbone import EmptyPatchError, Patch, extract_patch
from ..geom import apply_transform, planarity_filter, voxel_downsample
from ..groupnet.network import extract_group_feature
from ..groupnet.train import TrainingPair
from ..icosa import IcosahedralGroup, get_group, quantize_rotation, uniform_rotations
from .synth import SynthConfig, synth_pair


@dataclass
class PatchPair:
    """Patch around a keypoint of ``P`` and around its nearest ground-truth neighbor in ``Q``.

    ``rotation`` maps the ``p`` frame to the ``q`` frame; ``offset`` is the keypoint
    mismatch after alignment.
    """

    p: Patch
    q: Patch
    rotation: NDArray
    offset: float


def sample_patch_pairs(
    n_pairs: int,
    seed: int = 0,
    radius: float = 0.4,
    voxel: float | None = 0.05,
    noise_sigma: float = 0.025,
    per_scene: int = 60,
    max_offset: float | None = None,
    synth: SynthConfig | None = None,
    augment: bool = True,
) -> list[PatchPair]:
    """``n_pairs`` patch pairs from full-overlap scene pairs with independent noise and voxelization.

    Keypoints are drawn uniformly from the downsampled ``P`` and planarity-filtered; scene
    ``s`` uses seed ``seed * 100003 + s`` so datasets with different ``seed`` are disjoint.
    ``voxel=None`` keeps the clouds at full density (``max_offset`` then defaults to 0.05).
    With ``augment``, both patches of every pair get an independent uniform random rotation.
    """
    if max_offset is None:
        max_offset = 0.05 if voxel is None else voxel
    base = synth or SynthConfig(extent=2.0, point_count=30000)
    out: list[PatchPair] = []
    s = 0
    while len(out) < n_pairs:
        cfg = SynthConfig(**{**base.to_dict(), "overlap_fraction": 1.0, "noise_sigma": noise_sigma,
                             "seed": seed * 100003 + s})
        s += 1
        P, Q, T = synth_pair(cfg)
        if voxel is not None:
            P = voxel_downsample(P, voxel)
            Q = voxel_downsample(Q, voxel)
        rng = np.random.default_rng(cfg.seed)
        kp = planarity_filter(P, rng.choice(len(P), min(len(P), 4 * per_scene), replace=False), radius)
        tp, tq = cKDTree(P), cKDTree(Q)
        d, kq = tq.query(apply_transform(T, P[kp]))
        taken = 0
        for a, b, off in zip(kp, kq, d):
            if off > max_offset or taken >= per_scene or len(out) >= n_pairs:
                continue
            try:
                pp = extract_patch(P, int(a), radius, tp)
                pq = extract_patch(Q, int(b), radius, tq)
            except EmptyPatchError:
                continue
            R = T.rotation.copy()
            if augment:
                Ra, Rb = uniform_rotations(2, rng)
                pp, pq, R = pp.rotated(Ra), pq.rotated(Rb), Rb @ R @ Ra.T
            out.append(PatchPair(pp, pq, R, float(off)))
            taken += 1
    return out


def training_pairs(pairs: list[PatchPair], group: IcosahedralGroup | None = None) -> list[TrainingPair]:
    """Initial group features and quantized ground-truth rotation for each patch pair."""
    group = group or get_group()
    out = []
    for pp in pairs:
        g, _ = quantize_rotation(pp.rotation)
        out.append(
            TrainingPair(extract_group_feature(pp.p, group), extract_group_feature(pp.q, group), pp.rotation, int(g))
        )
    return out


def rotate_patch_pair(pp: PatchPair, R: NDArray) -> PatchPair:
    """Apply an extra rotation ``R`` to the ``q`` side."""
    return PatchPair(pp.p, pp.q.rotated(R), R @ pp.rotation, pp.offset)


__all__ = ["PatchPair", "sample_patch_pairs", "training_pairs", "rotate_patch_pair"]
