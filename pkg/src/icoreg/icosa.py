"""Icosahedral rotation group: elements, Cayley table, neighborhood set, row permutations.

Elements are referred to by integer index in ``[0, 60)``; index 0 is the identity.
The group is built by closure from two generators and sorted by a rounded
lexicographic key, so two independent builds are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import TextIO

import numpy as np
from numpy.typing import NDArray

ORDER = 60
NEIGHBORHOOD_SIZE = 13

MATCH_TOL = 1e-6  # rad; distinct elements are >= 72 deg apart
_KEY_DECIMALS = 12


class GroupConstructionError(RuntimeError):
    """Raised when closure does not produce exactly the 60 icosahedral rotations."""


class InvalidRotationError(ValueError):
    pass


def rotation_angle(R: NDArray) -> NDArray:
    """Geodesic angle of rotation matrices, stable near zero.

    Uses ``||R - I||_F = 2*sqrt(2)*sin(theta/2)`` rather than ``arccos`` of the trace.
    """
    R = np.asarray(R, dtype=np.float64)
    diff = R - np.eye(3)
    fro = np.sqrt(np.sum(diff * diff, axis=(-2, -1)))
    return 2.0 * np.arcsin(np.clip(fro / (2.0 * np.sqrt(2.0)), 0.0, 1.0))


def axis_angle_matrix(axis: NDArray, angle: float) -> NDArray:
    """Rodrigues rotation about ``axis`` (normalized internally)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def icosahedron_vertices() -> NDArray:
    """The 12 unit vertices of the canonical icosahedron, cyclic permutations of (0, +-1, +-phi).

    Vertex 0 is ``(0, 1, phi)/|.|``; it anchors the neighborhood set.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for a in (1.0, -1.0):
        for b in (phi, -phi):
            verts.append((0.0, a, b))
            verts.append((a, b, 0.0))
            verts.append((b, 0.0, a))
    V = np.array(verts)
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def _generators() -> tuple[NDArray, NDArray]:
    V = icosahedron_vertices()
    v0 = V[0]
    # nearest other vertex shares an edge with v0
    d = np.linalg.norm(V - v0, axis=1)
    d[0] = np.inf
    v1 = V[int(np.argmin(d))]
    five_fold = axis_angle_matrix(v0, 2.0 * np.pi / 5.0)
    two_fold = axis_angle_matrix(v0 + v1, np.pi)
    return five_fold, two_fold


def _find(R: NDArray, elems: NDArray) -> tuple[int, float]:
    ang = rotation_angle(np.einsum("ij,nkj->nik", R, elems))  # R @ E^T
    i = int(np.argmin(ang))
    return i, float(ang[i])


def _canonical_key(R: NDArray) -> tuple[float, ...]:
    # + 0.0 folds -0.0 into 0.0
    return tuple(float(x) + 0.0 for x in np.round(R.ravel(), _KEY_DECIMALS))


@dataclass(frozen=True, eq=False)
class IcosahedralGroup:
    """The 60-element rotation group of the icosahedron.

    Attributes
    ----------
    rotations : (60, 3, 3) array
    cayley : (60, 60) int array, ``cayley[a, b]`` is the index of ``rotations[a] @ rotations[b]``
    inverse : (60,) int array
    neighborhood : (13,) int array, identity followed by the twelve 72-degree rotations
    """

    rotations: NDArray
    cayley: NDArray
    inverse: NDArray
    neighborhood: NDArray

    @property
    def identity(self) -> int:
        return 0

    def compose(self, a, b):
        return self.cayley[a, b]

    def invert(self, a):
        return self.inverse[a]

    def matrix(self, g) -> NDArray:
        return self.rotations[g]

    def permute(self, f: NDArray, m: int) -> NDArray:
        return permute(f, m, self)

    def quantize(self, R: NDArray) -> tuple[int, float]:
        return quantize_rotation(R, self)

    def dump(self, fh: TextIO) -> None:
        """Write rotations and the Cayley table as plain text, for diffing against other builds."""
        fh.write(f"# icosahedral group order={ORDER}\n")
        fh.write("rotations\n")
        for g, R in enumerate(self.rotations):
            fh.write(f"{g} " + " ".join(f"{x:.17g}" for x in R.ravel()) + "\n")
        fh.write("inverse\n")
        fh.write(" ".join(str(int(x)) for x in self.inverse) + "\n")
        fh.write("neighborhood\n")
        fh.write(" ".join(str(int(x)) for x in self.neighborhood) + "\n")
        fh.write("cayley\n")
        for row in self.cayley:
            fh.write(" ".join(str(int(x)) for x in row) + "\n")


def build_group() -> IcosahedralGroup:
    """Generate the icosahedral group by closure and tabulate it.

    Raises
    ------
    GroupConstructionError
        If closure yields anything other than 60 elements, or a product fails to
        match an element within ``MATCH_TOL``.
    """
    gens = _generators()
    elems = [np.eye(3)]
    frontier = [np.eye(3)]
    while frontier:
        nxt = []
        for A in frontier:
            for G in gens:
                P = A @ G
                _, ang = _find(P, np.array(elems))
                if ang > MATCH_TOL:
                    elems.append(P)
                    nxt.append(P)
                    if len(elems) > ORDER:
                        raise GroupConstructionError("closure produced more than 60 elements")
        frontier = nxt
    if len(elems) != ORDER:
        raise GroupConstructionError(f"closure produced {len(elems)} elements, expected {ORDER}")

    # clean up drift from repeated products: project each onto SO(3)
    rots = []
    for R in elems:
        U, _, Vt = np.linalg.svd(R)
        rots.append(U @ Vt)
    rest = sorted(rots[1:], key=_canonical_key)
    rotations = np.array([np.eye(3)] + rest)

    prods = np.einsum("aij,bjk->abik", rotations, rotations).reshape(-1, 3, 3)
    # angle between every product and every element, via ||P - E||_F
    diff = prods[:, None, :, :] - rotations[None, :, :, :]
    fro = np.sqrt(np.sum(diff * diff, axis=(-2, -1)))
    idx = np.argmin(fro, axis=1)
    best = 2.0 * np.arcsin(np.clip(fro[np.arange(len(idx)), idx] / (2.0 * np.sqrt(2.0)), 0.0, 1.0))
    if np.any(best > MATCH_TOL):
        raise GroupConstructionError("a product matched no element within tolerance")
    cayley = idx.reshape(ORDER, ORDER).astype(np.int64)

    inverse = np.argmax(cayley == 0, axis=1).astype(np.int64)
    if not np.all(cayley[np.arange(ORDER), inverse] == 0):
        raise GroupConstructionError("inverse table incomplete")

    angles = rotation_angle(rotations)
    five = np.flatnonzero(np.abs(angles - 2.0 * np.pi / 5.0) < MATCH_TOL)
    if len(five) != NEIGHBORHOOD_SIZE - 1:
        raise GroupConstructionError(f"expected 12 rotations of 72 degrees, found {len(five)}")
    neighborhood = np.concatenate([[0], five]).astype(np.int64)

    for arr in (rotations, cayley, inverse, neighborhood):
        arr.setflags(write=False)
    return IcosahedralGroup(rotations, cayley, inverse, neighborhood)


@lru_cache(maxsize=1)
def get_group() -> IcosahedralGroup:
    """Shared immutable instance."""
    return build_group()


def compose(a, b, group: IcosahedralGroup | None = None):
    """Index of ``R_a @ R_b``."""
    return (group or get_group()).cayley[a, b]


def inverse(a, group: IcosahedralGroup | None = None):
    return (group or get_group()).inverse[a]


def _check_rotation(R: NDArray, tol: float = 1e-6) -> NDArray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise InvalidRotationError(f"expected (..., 3, 3) matrices, got {R.shape}")
    RtR = np.einsum("...ji,...jk->...ik", R, R)
    if np.max(np.abs(RtR - np.eye(3)), initial=0.0) > tol or np.any(np.abs(np.linalg.det(R) - 1.0) > tol):
        raise InvalidRotationError("matrix is not a proper rotation")
    return R


def quantize_rotations(R: NDArray, group: IcosahedralGroup | None = None) -> tuple[NDArray, NDArray]:
    """Vectorized :func:`quantize_rotation` over a stack ``(N, 3, 3)``."""
    group = group or get_group()
    R = _check_rotation(R).reshape(-1, 3, 3)
    # tr(R G^T) = <R, G>_F, largest trace = smallest angle
    tr = R.reshape(-1, 9) @ group.rotations.reshape(ORDER, 9).T
    idx = np.argmax(tr, axis=1)  # first maximum -> lowest index on ties
    chosen = group.rotations[idx]
    ang = rotation_angle(np.einsum("nij,nkj->nik", R, chosen))
    return idx.astype(np.int64), ang


def quantize_rotation(R: NDArray, group: IcosahedralGroup | None = None) -> tuple[int, float]:
    """Nearest group element to ``R`` and the geodesic angle to it.

    Raises
    ------
    InvalidRotationError
        If ``R`` is not orthonormal with determinant +1 within 1e-6.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidRotationError(f"expected a 3x3 matrix, got {R.shape}")
    idx, ang = quantize_rotations(R[None], group)
    return int(idx[0]), float(ang[0])


def permute(f: NDArray, m: int, group: IcosahedralGroup | None = None) -> NDArray:
    """Row permutation ``f'(g) = f(g m)``: the group feature of the input rotated by ``m``."""
    group = group or get_group()
    f = np.asarray(f)
    if f.shape[0] != ORDER:
        raise ValueError(f"group feature must have {ORDER} rows, got {f.shape[0]}")
    return f[group.cayley[:, m]]


def uniform_rotations(n: int, rng: np.random.Generator) -> NDArray:
    """Haar-uniform rotations from normalized Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return quat_to_matrix(q)


def quat_to_matrix(q: NDArray) -> NDArray:
    """Scalar-first unit quaternions ``(..., 4)`` to rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def covering_radius_sample(n: int = 1_000_000, seed: int = 0, chunk: int = 200_000) -> float:
    """Largest quantization residual over ``n`` Haar-random rotations."""
    group = get_group()
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        _, ang = quantize_rotations(uniform_rotations(k, rng), group)
        worst = max(worst, float(ang.max()))
        done += k
    return worst
