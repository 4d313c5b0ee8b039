"""Descriptor, equivariance and rotation-residual losses with analytic gradients.

Each ``*_grad`` function returns ``(loss, grads)`` and is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp, softmax

from ..icosa import IcosahedralGroup, get_group
from .quat import matrix_to_quat

DESC_WEIGHT = 5.0


def invariant_loss_grad(d: NDArray, d_pos: NDArray, negatives: NDArray):
    """Batch-hard ratio loss on descriptors.

    ``(e^{|d-d+|} - min_neg e^{|d-d-|}) / (e^{|d-d+|} + sum_neg e^{|d-d-|})``

    Returns ``(loss, (g_d, g_pos, g_neg))``.
    """
    d = np.asarray(d, dtype=np.float64)
    d_pos = np.asarray(d_pos, dtype=np.float64)
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if neg.shape[0] == 0:
        raise ValueError("invariant loss needs at least one negative")
    u = d - d_pos
    a = np.linalg.norm(u)
    V = d - neg
    b = np.linalg.norm(V, axis=1)
    k = int(np.argmin(b))
    ea, eb = np.exp(a), np.exp(b)
    num = ea - eb[k]
    den = ea + eb.sum()
    loss = num / den

    dl_da = ea * (den - num) / den**2
    dl_db = -num * eb / den**2
    dl_db[k] -= eb[k] / den

    ua = u / a if a > 0 else np.zeros_like(u)
    vb = V / np.where(b > 0, b, 1.0)[:, None]
    g_d = dl_da * ua + dl_db @ vb
    g_pos = -dl_da * ua
    g_neg = -dl_db[:, None] * vb
    return float(loss), (g_d, g_pos, g_neg)


def invariant_loss(d, d_pos, negatives) -> float:
    return invariant_loss_grad(d, d_pos, negatives)[0]


def equivariant_loss_grad(f: NDArray, f_pos: NDArray, g_pos: int, group: IcosahedralGroup | None = None):
    """Cross-entropy over the 60 permutations with logits ``<f, P_g f+>``.

    Returns ``(loss, (g_f, g_fpos))``.
    """
    group = group or get_group()
    f = np.asarray(f, dtype=np.float64)
    f_pos = np.asarray(f_pos, dtype=np.float64)
    perms = f_pos[group.cayley.T]  # perms[g] = P_g f+
    logits = np.einsum("grc,rc->g", perms, f)
    loss = logsumexp(logits) - logits[g_pos]
    p = softmax(logits)
    p[g_pos] -= 1.0
    g_f = np.einsum("g,grc->rc", p, perms)
    # <f, P_g f+> = sum_r f[r] . f+[cayley[r, g]]
    g_fpos = np.zeros_like(f_pos)
    for g in range(len(p)):
        g_fpos[group.cayley[:, g]] += p[g] * f
    return float(loss), (g_f, g_fpos)


def equivariant_loss(f, f_pos, g_pos, group=None) -> float:
    return equivariant_loss_grad(f, f_pos, g_pos, group)[0]


def descriptor_loss_grad(d, d_pos, negatives, f, f_pos, g_pos, lam: float = DESC_WEIGHT, group=None):
    """``lam * invariant + equivariant``; returns ``(loss, dict of grads)``."""
    l1, (gd, gdp, gn) = invariant_loss_grad(d, d_pos, negatives)
    l2, (gf, gfp) = equivariant_loss_grad(f, f_pos, g_pos, group)
    grads = {"d": lam * gd, "d_pos": lam * gdp, "negatives": lam * gn, "f": gf, "f_pos": gfp}
    return lam * l1 + l2, grads


def descriptor_loss(d, d_pos, negatives, f, f_pos, g_pos, lam: float = DESC_WEIGHT, group=None) -> float:
    return descriptor_loss_grad(d, d_pos, negatives, f, f_pos, g_pos, lam, group)[0]


def residual_target(R_gt: NDArray, g_pos: int, group: IcosahedralGroup | None = None) -> NDArray:
    """Quaternion of ``R_gt R_{g+}^T``."""
    group = group or get_group()
    return matrix_to_quat(np.asarray(R_gt) @ group.rotations[g_pos].T)


def residual_loss_grad(q_raw: NDArray, target: NDArray):
    """``min_s |q/|q| - s target|`` over ``s = +-1``; gradient w.r.t. the raw quaternion."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw)
    if n == 0:
        raise ValueError("zero quaternion")
    q = q_raw / n
    t = np.asarray(target, dtype=np.float64)
    if np.linalg.norm(q + t) < np.linalg.norm(q - t):
        t = -t
    r = q - t
    loss = np.linalg.norm(r)
    if loss == 0:
        return 0.0, np.zeros(4)
    dq = r / loss
    return float(loss), (dq - q * (q @ dq)) / n


def loss_residual(q_pred: NDArray, R_gt: NDArray, g_pos: int, group: IcosahedralGroup | None = None) -> float:
    """Distance between the predicted residual quaternion and the ground-truth residual.

    A non-unit prediction is renormalized with a warning; a zero prediction raises.
    """
    q_pred = np.asarray(q_pred, dtype=np.float64)
    n = np.linalg.norm(q_pred)
    if n == 0:
        raise ValueError("zero quaternion")
    if abs(n - 1.0) > 1e-6:
        warnings.warn("predicted quaternion is not unit length; renormalizing", RuntimeWarning, stacklevel=2)
    return residual_loss_grad(q_pred, residual_target(R_gt, g_pos, group))[0]
