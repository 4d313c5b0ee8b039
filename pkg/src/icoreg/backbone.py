"""Local patch extraction and the default rotation-sensitive patch feature (soft spherical histogram).

The histogram is computed in the patch's own axis-aligned frame; there is no local
reference frame, so rotating a patch changes its feature. Bins are soft-assigned
(linear in radius and elevation, circular-linear in azimuth) which keeps the feature
Lipschitz in the point positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree


class EmptyPatchError(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    center: NDArray
    neighbors: NDArray  # center-relative, (k, 3)
    radius: float

    def rotated(self, R: NDArray) -> Patch:
        return Patch(self.center, self.neighbors @ np.asarray(R).T, self.radius)

    def __len__(self) -> int:
        return len(self.neighbors)


@dataclass(frozen=True)
class BackboneSpec:
    shells: int = 4
    azimuth_bins: int = 4
    elevation_bins: int = 2

    def __post_init__(self):
        if min(self.shells, self.azimuth_bins, self.elevation_bins) < 1:
            raise ValueError("bin counts must be >= 1")

    @property
    def output_dim(self) -> int:
        return self.shells * self.azimuth_bins * self.elevation_bins


class Backbone(Protocol):
    """Anything mapping a stack of point sets to one feature vector each."""

    output_dim: int

    def __call__(self, points: NDArray, radius: float) -> NDArray:
        """``points``: ``(B, k, 3)`` center-relative; returns ``(B, output_dim)``."""
        ...


def extract_patch(P: NDArray, center_index: int, radius: float, tree: cKDTree | None = None) -> Patch:
    """Points strictly within ``radius`` of ``P[center_index]`` (center excluded), in index order."""
    if radius <= 0:
        raise EmptyPatchError("radius must be positive")
    P = np.asarray(P, dtype=np.float64)
    c = P[center_index]
    if tree is not None:
        idx = np.array(sorted(tree.query_ball_point(c, radius)), dtype=np.int64)
        if len(idx):
            d = np.linalg.norm(P[idx] - c, axis=1)
            idx = idx[d < radius]
    else:
        idx = np.flatnonzero(np.linalg.norm(P - c, axis=1) < radius)
    idx = idx[idx != center_index]
    if len(idx) == 0:
        raise EmptyPatchError(f"no neighbors within {radius} of point {center_index}")
    return Patch(c.copy(), P[idx] - c, float(radius))


def _linear_weights(x: NDArray, n: int) -> tuple[NDArray, NDArray, NDArray]:
    """Tent weights of ``x`` in [0, 1] over ``n`` bins centered at ``(i + 0.5)/n``, clamped at the ends."""
    u = np.clip(x * n - 0.5, 0.0, n - 1.0)
    lo = np.minimum(np.floor(u).astype(np.int64), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w_hi = u - lo
    return lo, hi, w_hi


def canonical_order(points: NDArray) -> NDArray:
    """Points sorted lexicographically by (x, y, z).

    Accumulating in this order makes patch features bit-identical under any permutation
    of the input points (float sums depend on summation order).
    """
    pts = np.asarray(points, dtype=np.float64)
    return pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]


def soft_histogram(
    points: NDArray, radius: float, spec: BackboneSpec = BackboneSpec(), normalize: bool = True
) -> NDArray:
    """Soft spherical histogram of a batch of point sets.

    Parameters
    ----------
    points : (B, k, 3) or (k, 3)
        Center-relative coordinates.
    radius : float
        Patch radius; radial coordinate is ``|x| / radius``.

    normalize : bool
        L2-normalize each histogram (default). Unnormalized, each point contributes mass 1.

    Returns
    -------
    (B, S*A*E) or (S*A*E,) array, each row L2-normalized unless ``normalize`` is False. Flattened in
    ``(shell, elevation, azimuth)`` order.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    B, k, _ = pts.shape
    if k == 0:
        raise EmptyPatchError("cannot featurize an empty patch")
    S, A, E = spec.shells, spec.azimuth_bins, spec.elevation_bins

    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    rxy = np.hypot(x, y)
    r = np.hypot(rxy, z)
    rn = r / radius

    s_lo, s_hi, s_w = _linear_weights(rn, S)

    # Direction is undefined at the center; fade to uniform within the innermost half-shell.
    c = np.clip(rn * (2.0 * S), 0.0, 1.0)
    # Azimuth is undefined on the z axis; fade to uniform as sin(elevation) -> 0.
    with np.errstate(invalid="ignore", divide="ignore"):
        sin_el = np.where(r > 0, rxy / np.where(r > 0, r, 1.0), 0.0)
    polar = np.arctan2(rxy, z)  # 0 at +z
    e_lo, e_hi, e_w = _linear_weights(polar / np.pi, E)

    az = np.mod(np.arctan2(y, x), 2.0 * np.pi)
    ua = az * (A / (2.0 * np.pi)) - 0.5
    a_lo = np.floor(ua).astype(np.int64)
    a_w = ua - a_lo
    a_hi = np.mod(a_lo + 1, A)
    a_lo = np.mod(a_lo, A)

    # Per-point mass splits into a trilinear part (8 cells), a part spread uniformly over
    # azimuth (pole fade, 4 (s, e) cells) and a part spread over all directions (center
    # fade, 2 shells). Each is scattered with one bincount over batch-offset bin ids.
    off = (np.arange(B) * (S * E * A))[:, None]
    ss = ((s_lo, 1.0 - s_w), (s_hi, s_w))
    ee = ((e_lo, 1.0 - e_w), (e_hi, e_w))
    aa = ((a_lo, 1.0 - a_w), (a_hi, a_w))
    idx, wts = [], []
    for si, sw in ss:
        for ei, ew in ee:
            wse = sw * ew * c
            for ai, aw in aa:
                idx.append(off + (si * E + ei) * A + ai)
                wts.append(wse * sin_el * aw)
    hist = np.bincount(np.concatenate(idx, axis=None), np.concatenate(wts, axis=None), B * S * E * A)
    hist = hist.reshape(B, S, E, A)
    pole = np.zeros(B * S * E)
    for si, sw in ss:
        for ei, ew in ee:
            pole += np.bincount((np.arange(B)[:, None] * (S * E) + si * E + ei).ravel(),
                                (sw * ew * c * (1.0 - sin_el)).ravel(), B * S * E)  # fmt: skip
    center = np.zeros(B * S)
    for si, sw in ss:
        center += np.bincount((np.arange(B)[:, None] * S + si).ravel(), (sw * (1.0 - c)).ravel(), B * S)
    hist = hist + pole.reshape(B, S, E, 1) / A + center.reshape(B, S, 1, 1) / (E * A)
    hist = hist.reshape(B, S * E * A)
    if normalize:
        hist /= np.linalg.norm(hist, axis=1, keepdims=True)
    return hist[0] if single else hist


def phi_histogram(patch: Patch, spec: BackboneSpec = BackboneSpec()) -> NDArray:
    """Default backbone feature of one patch."""
    if len(patch.neighbors) == 0:
        raise EmptyPatchError("cannot featurize an empty patch")
    return soft_histogram(canonical_order(patch.neighbors), patch.radius, spec)


class HistogramBackbone:
    """Callable wrapper so the histogram satisfies :class:`Backbone`."""

    def __init__(self, spec: BackboneSpec = BackboneSpec()):
        self.spec = spec
        self.output_dim = spec.output_dim

    def __call__(self, points: NDArray, radius: float) -> NDArray:
        return soft_histogram(points, radius, self.spec)
