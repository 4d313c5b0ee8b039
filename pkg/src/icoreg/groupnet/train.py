"""Small-scale trainer for the embedder and the rotation-residual regressor.

Plain numpy Adam over hand-written backprop. Deterministic for a fixed seed: batches
are drawn from a seeded generator and gradients are summed in a fixed order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from ..icosa import IcosahedralGroup, get_group
from .losses import DESC_WEIGHT, descriptor_loss_grad, residual_loss_grad, residual_target
from .network import (
    ConvLayer,
    DenseLayer,
    NetworkWeights,
    RegressorWeights,
    embed_backward,
    embed_forward,
    embed,
    regressor_backward,
    regressor_forward,
    regressor_input,
)

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingPair:
    """Initial group features of a patch ``p`` and of ``q = R p``; ``g_pos`` is the nearest element to ``R``."""

    f0_p: NDArray
    f0_q: NDArray
    rotation: NDArray
    g_pos: int


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    decay: float = 0.5
    decay_epochs: float = 1.8
    lam: float = DESC_WEIGHT
    seed: int = 0


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)  # full-set loss after each epoch; [0] is before training
    step_loss: list[float] = field(default_factory=list)


class Adam:
    def __init__(self, params: list[NDArray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[NDArray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _as_f64_layers(layers):
    return [ConvLayer(np.array(l.weight, np.float64), np.array(l.bias, np.float64)) for l in layers]


def _to_f32(layers, cls=ConvLayer):
    return [cls(l.weight.astype(np.float32), l.bias.astype(np.float32)) for l in layers]


def batch_descriptor_loss(layers, f0_q: NDArray, f0_p: NDArray, g_pos: NDArray, lam: float, group, need_grad=True):
    """Mean descriptor loss of a batch; negatives of sample i are the positives of the other samples."""
    B = len(g_pos)
    if B < 2:
        raise ValueError("a batch needs at least two pairs to supply negatives")
    cq = embed_forward(f0_q, layers, group)
    cp = embed_forward(f0_p, layers, group)
    total = 0.0
    gd_q = np.zeros_like(cq.desc)
    gd_p = np.zeros_like(cp.desc)
    gf_q = np.zeros_like(cq.f_l)
    gf_p = np.zeros_like(cp.f_l)
    idx = np.arange(B)
    for i in range(B):
        others = idx != i
        loss, g = descriptor_loss_grad(
            cq.desc[i], cp.desc[i], cp.desc[others], cq.f_l[i], cp.f_l[i], int(g_pos[i]), lam, group
        )
        total += loss
        if need_grad:
            gd_q[i] += g["d"]
            gd_p[i] += g["d_pos"]
            gd_p[others] += g["negatives"]
            gf_q[i] += g["f"]
            gf_p[i] += g["f_pos"]
    total /= B
    if not need_grad:
        return total, None
    gq = embed_backward(cq, layers, group, gf_q / B, gd_q / B)
    gp = embed_backward(cp, layers, group, gf_p / B, gd_p / B)
    grads = [(a[0] + b[0], a[1] + b[1]) for a, b in zip(gq, gp)]
    return total, grads


def _stack(pairs):
    f0_q = np.stack([p.f0_q for p in pairs]).astype(np.float64)
    f0_p = np.stack([p.f0_p for p in pairs]).astype(np.float64)
    g = np.array([p.g_pos for p in pairs], dtype=np.int64)
    return f0_q, f0_p, g


def _fixed_batches(n: int, bs: int):
    """Consecutive batches; a trailing singleton is merged into the previous batch."""
    starts = list(range(0, n, bs))
    out = [np.arange(s, min(s + bs, n)) for s in starts]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def dataset_descriptor_loss(layers, pairs, cfg: TrainConfig, group=None) -> float:
    """Mean loss over fixed consecutive batches (no shuffling)."""
    group = group or get_group()
    f0_q, f0_p, g = _stack(pairs)
    total, count = 0.0, 0
    for b in _fixed_batches(len(pairs), cfg.batch_size):
        loss, _ = batch_descriptor_loss(layers, f0_q[b], f0_p[b], g[b], cfg.lam, group, need_grad=False)
        total += loss * len(b)
        count += len(b)
    return total / count


def train_embedder(
    pairs: list[TrainingPair],
    weights: NetworkWeights,
    cfg: TrainConfig = TrainConfig(),
    group: IcosahedralGroup | None = None,
) -> tuple[NetworkWeights, TrainHistory]:
    """Minimize the descriptor loss over ``pairs`` with Adam; returns float32 weights and the history.

    Raises
    ------
    TrainingDivergedError
        If the loss becomes non-finite.
    """
    group = group or get_group()
    if len(pairs) < 2:
        raise ValueError("need at least two training pairs")
    layers = _as_f64_layers(weights.embedder)
    params = [t for l in layers for t in (l.weight, l.bias)]
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    f0_q, f0_p, g = _stack(pairs)
    hist = TrainHistory()
    hist.epoch_loss.append(dataset_descriptor_loss(layers, pairs, cfg, group))
    steps_per_epoch = len(_fixed_batches(len(pairs), cfg.batch_size))
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for b in _fixed_batches(len(pairs), cfg.batch_size):
            sel = order[b]
            loss, grads = batch_descriptor_loss(layers, f0_q[sel], f0_p[sel], g[sel], cfg.lam, group)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"descriptor loss became {loss} at epoch {epoch}, step {step}")
            hist.step_loss.append(loss)
            lr = cfg.lr * cfg.decay ** (step / (cfg.decay_epochs * steps_per_epoch))
            opt.step([t for gw in grads for t in gw], lr)
            step += 1
        ep = dataset_descriptor_loss(layers, pairs, cfg, group)
        if not np.isfinite(ep):
            raise TrainingDivergedError(f"descriptor loss became {ep} after epoch {epoch}")
        hist.epoch_loss.append(ep)
        log.info("embedder epoch %d loss %.6f", epoch + 1, ep)
    out = NetworkWeights(_to_f32(layers), weights.regressor, dict(weights.meta, embedder_epochs=cfg.epochs))
    return out, hist


def _regressor_batch(reg, X, targets, group, need_grad=True):
    cache = regressor_forward(X, reg, group)
    total = 0.0
    dq = np.zeros_like(cache.out)
    for i in range(len(X)):
        loss, g = residual_loss_grad(cache.out[i], targets[i])
        total += loss
        dq[i] = g
    B = len(X)
    if not need_grad:
        return total / B, None
    conv_g, mlp_g = regressor_backward(cache, reg, group, dq / B)
    return total / B, conv_g + mlp_g


def regressor_dataset(pairs: list[TrainingPair], weights: NetworkWeights, group=None):
    """Coarsely aligned regressor inputs and residual-quaternion targets, using the ground-truth coarse element."""
    group = group or get_group()
    f0_q, f0_p, g = _stack(pairs)
    fl_q = embed(f0_q, weights, group)
    fl_p = embed(f0_p, weights, group)
    X = np.stack([regressor_input(f0_p[i], fl_p[i], f0_q[i], fl_q[i], int(g[i]), group) for i in range(len(pairs))])
    T = np.stack([residual_target(p.rotation, p.g_pos, group) for p in pairs])
    return X, T


def train_regressor(
    pairs: list[TrainingPair],
    weights: NetworkWeights,
    cfg: TrainConfig = TrainConfig(lr=1e-3, decay_epochs=3.0),
    group: IcosahedralGroup | None = None,
) -> tuple[NetworkWeights, TrainHistory]:
    """Fit the regressor to ground-truth residual rotations with the embedder frozen."""
    group = group or get_group()
    if weights.regressor is None:
        raise ValueError("weights carry no regressor to train")
    X, T = regressor_dataset(pairs, weights, group)
    reg = RegressorWeights(
        _as_f64_layers(weights.regressor.conv),
        [DenseLayer(np.array(l.weight, np.float64), np.array(l.bias, np.float64)) for l in weights.regressor.mlp],
    )
    params = [t for l in reg.conv + reg.mlp for t in (l.weight, l.bias)]
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    hist.epoch_loss.append(_regressor_batch(reg, X, T, group, need_grad=False)[0])
    batches = _fixed_batches(len(pairs), cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for b in batches:
            sel = order[b]
            loss, grads = _regressor_batch(reg, X[sel], T[sel], group)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"residual loss became {loss} at epoch {epoch}, step {step}")
            hist.step_loss.append(loss)
            lr = cfg.lr * cfg.decay ** (step / (cfg.decay_epochs * len(batches)))
            opt.step([t for gw in grads for t in gw], lr)
            step += 1
        hist.epoch_loss.append(_regressor_batch(reg, X, T, group, need_grad=False)[0])
        log.info("regressor epoch %d loss %.6f", epoch + 1, hist.epoch_loss[-1])
    out_reg = RegressorWeights(_to_f32(reg.conv), _to_f32(reg.mlp, DenseLayer))
    return NetworkWeights(weights.embedder, out_reg, dict(weights.meta, regressor_epochs=cfg.epochs)), hist
