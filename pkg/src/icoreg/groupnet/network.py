"""Group feature extraction, localized group convolution, embedder and rotation-residual regressor.

Group features are plain ``(..., 60, n)`` arrays; row ``g`` belongs to group element ``g``.
All layers accept arbitrary leading batch dimensions and compute in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from ..backbone import Backbone, HistogramBackbone, Patch, canonical_order
from ..icosa import NEIGHBORHOOD_SIZE, ORDER, IcosahedralGroup, get_group


class DegenerateFeatureError(ValueError):
    """A feature that must be normalized is identically zero."""


@dataclass
class ConvLayer:
    """Weights ``(n_out, 13, n_in)`` and bias ``(n_out,)`` of one group convolution."""

    weight: NDArray
    bias: NDArray

    @property
    def n_in(self) -> int:
        return self.weight.shape[2]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseLayer:
    weight: NDArray  # (n_out, n_in)
    bias: NDArray


@dataclass
class RegressorWeights:
    conv: list[ConvLayer]
    mlp: list[DenseLayer]


@dataclass
class NetworkWeights:
    """Embedder (4 group convolutions) plus an optional rotation-residual regressor."""

    embedder: list[ConvLayer]
    regressor: RegressorWeights | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        check_chain(self.embedder)
        if self.regressor is not None:
            check_chain(self.regressor.conv)
            dims = [self.regressor.conv[-1].n_out] + [l.weight.shape[0] for l in self.regressor.mlp]
            for l, n_in in zip(self.regressor.mlp, dims[:-1]):
                if l.weight.shape[1] != n_in:
                    raise ValueError("regressor MLP dimensions do not chain")
            if dims[-1] != 4:
                raise ValueError("regressor must output a 4-vector")

    @property
    def input_dim(self) -> int:
        return self.embedder[0].n_in

    @property
    def output_dim(self) -> int:
        return self.embedder[-1].n_out

    def copy(self) -> NetworkWeights:
        conv = lambda ls: [ConvLayer(l.weight.copy(), l.bias.copy()) for l in ls]
        reg = None
        if self.regressor is not None:
            reg = RegressorWeights(
                conv(self.regressor.conv), [DenseLayer(l.weight.copy(), l.bias.copy()) for l in self.regressor.mlp]
            )
        return NetworkWeights(conv(self.embedder), reg, dict(self.meta))


def check_chain(layers: list[ConvLayer]) -> None:
    for a, b in zip(layers[:-1], layers[1:]):
        if a.n_out != b.n_in:
            raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
    for l in layers:
        if l.weight.ndim != 3 or l.weight.shape[1] != NEIGHBORHOOD_SIZE or l.bias.shape != (l.n_out,):
            raise ValueError(f"bad group-conv layer shapes {l.weight.shape}, {l.bias.shape}")


def _glorot(rng, n_in: int, n_out: int, size) -> NDArray:
    a = np.sqrt(6.0 / (NEIGHBORHOOD_SIZE * n_in + n_out))
    return rng.uniform(-a, a, size=size)


def init_conv_stack(widths: list[int], rng: np.random.Generator) -> list[ConvLayer]:
    return [
        ConvLayer(
            _glorot(rng, a, b, (b, NEIGHBORHOOD_SIZE, a)).astype(np.float32),
            np.zeros(b, dtype=np.float32),
        )
        for a, b in zip(widths[:-1], widths[1:])
    ]


def init_weights(
    seed: int = 0,
    widths: tuple[int, ...] = (32, 32, 32, 32, 32),
    regressor_conv: tuple[int, ...] | None = (32, 32, 32),
    regressor_mlp: tuple[int, ...] = (32, 32),
) -> NetworkWeights:
    """Seeded initial weights; uniform in +-sqrt(6 / (13 n_in + n_out)) for group convolutions.

    The regressor's last layer starts at zero weight with bias (1, 0, 0, 0), so an
    untrained regressor predicts the identity residual.
    """
    rng = np.random.default_rng(seed)
    embedder = init_conv_stack(list(widths), rng)
    regressor = None
    if regressor_conv is not None:
        n0, nl = widths[0], widths[-1]
        conv = init_conv_stack([2 * n0 + 2 * nl, *regressor_conv], rng)
        dims = [regressor_conv[-1], *regressor_mlp, 4]
        mlp = []
        for a, b in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (a + b))
            mlp.append(DenseLayer(rng.uniform(-lim, lim, (b, a)).astype(np.float32), np.zeros(b, np.float32)))
        mlp[-1].weight[:] = 0.0
        mlp[-1].bias[:] = np.array([1.0, 0.0, 0.0, 0.0], np.float32)
        regressor = RegressorWeights(conv, mlp)
    return NetworkWeights(embedder, regressor, {"seed": seed})


# ---------------------------------------------------------------------------
# group feature extraction
# ---------------------------------------------------------------------------


def extract_group_feature(
    patch: Patch, group: IcosahedralGroup | None = None, backbone: Backbone | None = None
) -> NDArray:
    """Row ``g`` is the backbone feature of the patch rotated by ``R_g``."""
    group = group or get_group()
    backbone = backbone or HistogramBackbone()
    pts = np.einsum("gij,kj->gki", group.rotations, canonical_order(patch.neighbors))
    return backbone(pts, patch.radius)


# ---------------------------------------------------------------------------
# group convolution
# ---------------------------------------------------------------------------


def neighbor_table(group: IcosahedralGroup, neighborhood=None) -> NDArray:
    """``table[i, g]`` is the row index of ``h_i g``."""
    H = group.neighborhood if neighborhood is None else np.asarray(neighborhood)
    return group.cayley[H, :]


def group_conv(f: NDArray, layer: ConvLayer, group: IcosahedralGroup | None = None, neighborhood=None) -> NDArray:
    """``out[g, j] = sum_i w[j, i] . f[h_i g] + b[j]``.

    ``neighborhood`` overrides the 13-element set (the weight's middle axis must match).
    """
    group = group or get_group()
    f = np.asarray(f, dtype=np.float64)
    table = neighbor_table(group, neighborhood)
    W = np.asarray(layer.weight, dtype=np.float64)
    if f.shape[-2] != ORDER or f.shape[-1] != W.shape[2] or W.shape[1] != len(table):
        raise ValueError(f"group_conv shape mismatch: feature {f.shape}, weight {W.shape}")
    X = f[..., table.T, :]  # (..., 60, 13, n_in)
    X = X.reshape(*X.shape[:-2], -1)
    return X @ W.reshape(W.shape[0], -1).T + np.asarray(layer.bias, dtype=np.float64)


def _group_conv_backward(dout: NDArray, x: NDArray, layer: ConvLayer, table: NDArray):
    """Gradients of :func:`group_conv` w.r.t. input, weight and bias (summed over batch)."""
    W = np.asarray(layer.weight, dtype=np.float64)
    n_out, n_h, n_in = W.shape
    X = x[..., table.T, :].reshape(-1, n_h * n_in)  # rows: (batch, g)
    d2 = dout.reshape(-1, n_out)
    dW = (d2.T @ X).reshape(n_out, n_h, n_in)
    db = d2.sum(axis=0)
    dX = (dout @ W.reshape(n_out, -1)).reshape(*dout.shape[:-1], n_h, n_in)  # (..., 60, 13, n_in)
    dx = np.zeros_like(x)
    for i in range(n_h):
        # g -> h_i g is a bijection, so no index collides within one i
        dx[..., table[i], :] += dX[..., :, i, :]
    return dx, dW, db


def frobenius_normalize(f: NDArray) -> NDArray:
    n = np.sqrt(np.sum(f * f, axis=(-2, -1), keepdims=True))
    if np.any(n == 0):
        raise DegenerateFeatureError("cannot normalize an all-zero group feature")
    return f / n


def _normalize_backward(dy: NDArray, y: NDArray, norm: NDArray, axes) -> NDArray:
    return (dy - y * np.sum(y * dy, axis=axes, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# embedder
# ---------------------------------------------------------------------------


def embed_prefix(f0: NDArray, layers: list[ConvLayer], k: int, group: IcosahedralGroup | None = None) -> NDArray:
    """Output of the first ``k`` (group_conv, ReLU) blocks, unnormalized; ``k = 0`` returns ``f0``."""
    group = group or get_group()
    f = np.asarray(f0, dtype=np.float64)
    for layer in layers[:k]:
        f = np.maximum(group_conv(f, layer, group), 0.0)
    return f


def embed(f0: NDArray, weights: NetworkWeights | list[ConvLayer], group: IcosahedralGroup | None = None) -> NDArray:
    """All (group_conv, ReLU) blocks followed by Frobenius normalization of each 60 x n_l matrix."""
    layers = weights.embedder if isinstance(weights, NetworkWeights) else weights
    if np.asarray(f0).shape[-1] != layers[0].n_in:
        raise ValueError(f"input width {np.asarray(f0).shape[-1]} does not match embedder ({layers[0].n_in})")
    return frobenius_normalize(embed_prefix(f0, layers, len(layers), group))


def pool_descriptor(f_l: NDArray) -> NDArray:
    """Mean over the 60 group rows, L2-normalized."""
    d = np.asarray(f_l, dtype=np.float64).mean(axis=-2)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateFeatureError("pooled descriptor is the zero vector")
    return d / n


@dataclass
class EmbedCache:
    inputs: list[NDArray]
    pre: list[NDArray]
    out_raw: NDArray
    out_norm: NDArray
    f_l: NDArray
    pooled: NDArray
    pooled_norm: NDArray
    desc: NDArray


def embed_forward(f0: NDArray, layers: list[ConvLayer], group: IcosahedralGroup) -> EmbedCache:
    """Forward pass keeping what backprop needs. Returns f_l and descriptor inside the cache."""
    x = np.asarray(f0, dtype=np.float64)
    inputs, pre = [], []
    for layer in layers:
        inputs.append(x)
        z = group_conv(x, layer, group)
        pre.append(z)
        x = np.maximum(z, 0.0)
    norm = np.sqrt(np.sum(x * x, axis=(-2, -1), keepdims=True))
    if np.any(norm == 0):
        raise DegenerateFeatureError("embedder output is identically zero")
    f_l = x / norm
    pooled = f_l.mean(axis=-2)
    pn = np.linalg.norm(pooled, axis=-1, keepdims=True)
    return EmbedCache(inputs, pre, x, norm, f_l, pooled, pn, pooled / pn)


def embed_backward(
    cache: EmbedCache, layers: list[ConvLayer], group: IcosahedralGroup, d_f: NDArray | None, d_desc: NDArray | None
):
    """Gradients w.r.t. each layer's (weight, bias) given upstream grads on f_l and the descriptor."""
    g_f = np.zeros_like(cache.f_l) if d_f is None else np.array(d_f, dtype=np.float64)
    if d_desc is not None:
        d_pooled = _normalize_backward(d_desc, cache.desc, cache.pooled_norm, -1)
        g_f = g_f + np.broadcast_to(d_pooled[..., None, :] / ORDER, g_f.shape)
    g = _normalize_backward(g_f, cache.f_l, cache.out_norm, (-2, -1))
    table = neighbor_table(group)
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        g = g * (cache.pre[k] > 0)
        g, dW, db = _group_conv_backward(g, cache.inputs[k], layers[k], table)
        grads[k] = (dW, db)
    return grads


# ---------------------------------------------------------------------------
# rotation-residual regressor
# ---------------------------------------------------------------------------


def regressor_input(f0_p, fl_p, f0_q, fl_q, coarse: int, group: IcosahedralGroup | None = None) -> NDArray:
    """``[f0_q ; fl_q ; P_c f0_p ; P_c fl_p]`` channel-wise, shape ``(60, 2 n0 + 2 n_l)``."""
    group = group or get_group()
    perm = group.cayley[:, coarse]
    return np.concatenate([f0_q, fl_q, np.asarray(f0_p)[perm], np.asarray(fl_p)[perm]], axis=-1)


@dataclass
class RegressorCache:
    inputs: list[NDArray]
    pre: list[NDArray]
    last_act: NDArray
    pooled: NDArray
    mlp_in: list[NDArray]
    mlp_pre: list[NDArray]
    out: NDArray


def regressor_forward(X: NDArray, reg: RegressorWeights, group: IcosahedralGroup) -> RegressorCache:
    x = np.asarray(X, dtype=np.float64)
    inputs, pre = [], []
    for layer in reg.conv:
        inputs.append(x)
        z = group_conv(x, layer, group)
        pre.append(z)
        x = np.maximum(z, 0.0)
    pooled = x.mean(axis=-2)
    h = pooled
    mlp_in, mlp_pre = [], []
    for n, layer in enumerate(reg.mlp):
        mlp_in.append(h)
        z = h @ np.asarray(layer.weight, np.float64).T + np.asarray(layer.bias, np.float64)
        mlp_pre.append(z)
        h = np.maximum(z, 0.0) if n < len(reg.mlp) - 1 else z
    return RegressorCache(inputs, pre, x, pooled, mlp_in, mlp_pre, h)


def regressor_backward(cache: RegressorCache, reg: RegressorWeights, group: IcosahedralGroup, d_out: NDArray):
    """Returns ``(conv_grads, mlp_grads)`` as lists of (dW, db)."""
    g = np.asarray(d_out, dtype=np.float64)
    batch_axes = tuple(range(g.ndim - 1))
    mlp_grads = [None] * len(reg.mlp)
    for n in range(len(reg.mlp) - 1, -1, -1):
        if n < len(reg.mlp) - 1:
            g = g * (cache.mlp_pre[n] > 0)
        x = cache.mlp_in[n]
        dW = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        db = g.sum(axis=batch_axes)
        mlp_grads[n] = (dW, db)
        g = g @ np.asarray(reg.mlp[n].weight, np.float64)
    g = np.broadcast_to(g[..., None, :] / ORDER, cache.last_act.shape)
    table = neighbor_table(group)
    conv_grads = [None] * len(reg.conv)
    for k in range(len(reg.conv) - 1, -1, -1):
        g = g * (cache.pre[k] > 0)
        g, dW, db = _group_conv_backward(g, cache.inputs[k], reg.conv[k], table)
        conv_grads[k] = (dW, db)
    return conv_grads, mlp_grads


def regress_residual(X: NDArray, reg: RegressorWeights, group: IcosahedralGroup | None = None) -> NDArray:
    """Unit quaternion (w, x, y, z) of the residual rotation, sign fixed to w >= 0."""
    group = group or get_group()
    q = regressor_forward(X, reg, group).out
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateFeatureError("regressor produced a zero quaternion")
    q = q / n
    return np.where(q[..., :1] < 0, -q, q)
