"""Procedural scenes, overlapping view pairs and patch perturbations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from ..backbone import Patch
from ..geom import RigidTransform, apply_transform, random_transform

SHAPES = ("terrain", "blocks")


class InfeasibleOverlapError(ValueError):
    pass


@dataclass
class SynthConfig:
    base_shape: str = "terrain"
    point_count: int = 20000
    overlap_fraction: float = 0.7
    noise_sigma: float = 0.0
    dropout_fraction: float = 0.0
    outlier_fraction: float = 0.0
    max_angle: float = math.pi
    max_translation: float = 1.0
    extent: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.base_shape not in SHAPES:
            raise ValueError(f"unknown base_shape {self.base_shape!r}; choose from {SHAPES}")
        if not 0.0 < self.overlap_fraction <= 1.0:
            raise InfeasibleOverlapError("overlap_fraction must be in (0, 1]")
        if not 0.0 <= self.dropout_fraction < 1.0 or not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("dropout and outlier fractions must be in [0, 1)")
        if self.point_count < 100:
            raise ValueError("point_count must be at least 100")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _terrain_height(rng: np.random.Generator, extent: float):
    """Random height field: Gaussian bumps and pits of mixed scale plus two oblique ridges.

    Shape sizes are given for a 4-unit scene and scale with ``extent``.
    """
    h = extent / 2.0
    s = extent / 4.0
    n = 40
    cx = rng.uniform(-h, h, n)
    cy = rng.uniform(-h, h, n)
    amp = s * rng.uniform(0.15, 0.45, n) * rng.choice([-1.0, 1.0], n)
    sx = s * rng.uniform(0.12, 0.4, n)
    sy = sx * rng.uniform(0.5, 2.0, n)
    th = rng.uniform(0, np.pi, n)
    ridge_dir = rng.standard_normal((2, 2))
    ridge_dir /= np.linalg.norm(ridge_dir, axis=1, keepdims=True)
    ridge_off = rng.uniform(-h / 2, h / 2, 2)
    ridge_amp = s * rng.uniform(0.2, 0.35, 2)
    ridge_w = 0.15 * s

    def height(x, y):
        z = np.zeros_like(x)
        cth, sth = np.cos(th), np.sin(th)
        for k in range(n):
            dx, dy = x - cx[k], y - cy[k]
            u = cth[k] * dx + sth[k] * dy
            v = -sth[k] * dx + cth[k] * dy
            z += amp[k] * np.exp(-0.5 * ((u / sx[k]) ** 2 + (v / sy[k]) ** 2))
        for k in range(2):
            d = ridge_dir[k, 0] * x + ridge_dir[k, 1] * y - ridge_off[k]
            z += ridge_amp[k] * np.exp(-0.5 * (d / ridge_w) ** 2)
        return z

    return height


def _box_surface(rng, center, size, n):
    """Uniform samples on the 5 exposed faces (no bottom) of an axis-aligned box."""
    sx, sy, sz = size
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    P = np.zeros((n, 3))
    top = face == 0
    P[top] = np.c_[u[top] * sx, v[top] * sy, np.full(top.sum(), sz / 2)]
    for f, sign in ((1, 1), (2, -1)):
        m = face == f
        P[m] = np.c_[u[m] * sx, np.full(m.sum(), sign * sy / 2), v[m] * sz]
    for f, sign in ((3, 1), (4, -1)):
        m = face == f
        P[m] = np.c_[np.full(m.sum(), sign * sx / 2), u[m] * sy, v[m] * sz]
    return P + center


def make_scene(shape: str, point_count: int, extent: float, rng: np.random.Generator) -> NDArray:
    """Dense, non-planar, asymmetric surface samples in a box of side ``extent``."""
    h = extent / 2.0
    s = extent / 4.0
    height = _terrain_height(rng, extent)
    if shape == "terrain":
        n_ground, n_obj = point_count * 3 // 4, point_count - point_count * 3 // 4
    else:
        n_ground, n_obj = point_count // 2, point_count - point_count // 2
    x = rng.uniform(-h, h, n_ground)
    y = rng.uniform(-h, h, n_ground)
    ground = np.c_[x, y, height(x, y)]

    parts = [ground]
    n_shapes = 6 if shape == "terrain" else 12
    per = np.full(n_shapes, n_obj // n_shapes)
    per[: n_obj - per.sum()] += 1
    for k in range(n_shapes):
        c = rng.uniform(-0.85 * h, 0.85 * h, 2)
        base = float(height(c[:1], c[1:])[0])
        if k % 2 == 0:
            r = s * rng.uniform(0.15, 0.35)
            d = rng.standard_normal((per[k], 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            d[:, 2] = np.abs(d[:, 2]) * rng.uniform(0.5, 1.0)  # squashed hemisphere
            parts.append(np.array([c[0], c[1], base]) + r * d)
        else:
            size = s * rng.uniform(0.2, 0.6, 3)
            ctr = np.array([c[0], c[1], base + size[2] / 2])
            parts.append(_box_surface(rng, ctr, size, per[k]))
    return np.concatenate(parts)


def synth_pair(cfg: SynthConfig) -> tuple[NDArray, NDArray, RigidTransform]:
    """Two overlapping views ``P`` and ``Q`` of one procedural scene with ``Q = T_gt(view)``.

    Views are slabs along x holding the same underlying samples; the overlap slab has
    ``overlap_fraction`` of ``P``'s points. With overlap 1, no noise, dropout or outliers,
    ``Q`` is exactly ``T_gt(P)``.
    """
    rng = np.random.default_rng(cfg.seed)
    scene = make_scene(cfg.base_shape, cfg.point_count, cfg.extent, rng)
    T_gt = random_transform(rng, cfg.max_angle, cfg.max_translation)

    if cfg.overlap_fraction >= 1.0:
        P_view, Q_view = scene, scene
    else:
        # symmetric slabs: |P| = |Q| = c N, overlap (2c - 1) N, ratio (2c - 1)/c
        c = 1.0 / (2.0 - cfg.overlap_fraction)
        x = scene[:, 0]
        hi = np.quantile(x, c)
        lo = np.quantile(x, 1.0 - c)
        if not lo < hi:
            raise InfeasibleOverlapError("overlap request yields an empty overlap region")
        P_view = scene[x <= hi]
        Q_view = scene[x >= lo]

    P = _degrade(P_view, cfg, rng)
    Q = apply_transform(T_gt, _degrade(Q_view, cfg, rng))
    return P, Q, T_gt


def _degrade(X: NDArray, cfg: SynthConfig, rng) -> NDArray:
    if cfg.dropout_fraction > 0:
        keep = rng.permutation(len(X))[: len(X) - int(round(cfg.dropout_fraction * len(X)))]
        X = X[np.sort(keep)]
    if cfg.noise_sigma > 0:
        X = X + rng.normal(0.0, cfg.noise_sigma, X.shape)
    if cfg.outlier_fraction > 0:
        k = math.ceil(cfg.outlier_fraction * len(X))
        lo, hi = X.min(axis=0), X.max(axis=0)
        X = np.concatenate([X, rng.uniform(lo, hi, (k, 3))])
    return X


def measured_overlap(P: NDArray, Q: NDArray, T_gt: RigidTransform) -> float:
    """Fraction of ``P`` with a ``Q`` point within twice the mean NN spacing of ``P`` after alignment."""
    spacing = cKDTree(P).query(P, k=2)[0][:, 1].mean()
    d, _ = cKDTree(Q).query(apply_transform(T_gt, P))
    return float(np.mean(d <= 2.0 * spacing))


def perturb_patch(
    patch: Patch, dropout_fraction: float = 0.0, noise_point_fraction: float = 0.0, seed=0
) -> Patch:
    """Drop ``round(dropout_fraction * n)`` points, then add ``ceil(noise_point_fraction * n)`` uniform points in the ball."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = patch.neighbors
    n = len(pts)
    if dropout_fraction:
        if not 0.0 <= dropout_fraction < 1.0:
            raise ValueError("dropout_fraction must be in [0, 1)")
        keep = np.sort(rng.permutation(n)[: n - int(round(dropout_fraction * n))])
        pts = pts[keep]
    if noise_point_fraction:
        k = math.ceil(noise_point_fraction * n)
        d = rng.standard_normal((k, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = patch.radius * rng.uniform(0, 1, k) ** (1.0 / 3.0) * (1.0 - 1e-9)
        pts = np.concatenate([pts, d * r[:, None]])
    return Patch(patch.center, pts, patch.radius)
