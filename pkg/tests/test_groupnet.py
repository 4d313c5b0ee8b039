import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icoreg.backbone import Patch
from icoreg.groupnet import (
    ConvLayer,
    DegenerateFeatureError,
    NetworkWeights,
    TrainConfig,
    TrainingPair,
    WeightsFormatError,
    descriptor_loss,
    descriptor_loss_grad,
    embed,
    embed_prefix,
    equivariant_loss_grad,
    extract_group_feature,
    group_conv,
    init_weights,
    invariant_loss_grad,
    load_weights,
    loss_residual,
    pool_descriptor,
    regress_residual,
    regressor_input,
    residual_loss_grad,
    residual_target,
    save_weights,
    train_embedder,
    train_regressor,
)
from icoreg.groupnet.network import embed_backward, embed_forward, regressor_backward, regressor_forward
from icoreg.groupnet.quat import matrix_to_quat, quat_angle, quat_to_matrix
from icoreg.groupnet.train import batch_descriptor_loss
from icoreg.icosa import ORDER, get_group, permute, quantize_rotation, uniform_rotations

G = get_group()


def _patch(seed, k=80):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 0.12, (k, 3)) * rng.uniform(0.3, 1.5, 3)
    return Patch(np.zeros(3), pts, 0.4)


def _fd(fun, x, eps=1e-6, sample=None):
    """Central differences; with ``sample``, only that many random entries (others are left NaN)."""
    g = np.zeros_like(x)
    idx = list(np.ndindex(x.shape))
    if sample is not None and sample < len(idx):
        g[:] = np.nan
        pick = np.random.default_rng(len(idx)).choice(len(idx), sample, replace=False)
        idx = [idx[k] for k in pick]
    for i in idx:
        old = x[i]
        x[i] = old + eps
        a = fun()
        x[i] = old - eps
        b = fun()
        x[i] = old
        g[i] = (a - b) / (2 * eps)
    return g


def _rel(a, b):
    m = ~np.isnan(b)
    return np.abs(a[m] - b[m]).max() / max(np.abs(b[m]).max(), 1e-8)


def test_group_conv_matches_definition():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((ORDER, 5))
    layer = ConvLayer(rng.standard_normal((4, 13, 5)), rng.standard_normal(4))
    out = group_conv(f, layer, G)
    H = G.neighborhood
    ref = np.zeros((ORDER, 4))
    for g in range(ORDER):
        for i, h in enumerate(H):
            ref[g] += layer.weight[:, i, :] @ f[G.cayley[h, g]]
        ref[g] += layer.bias
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_extract_group_feature_rows_are_rotated_patches():
    p = _patch(1)
    F = extract_group_feature(p, G)
    assert F.shape == (ORDER, 32)
    from icoreg.backbone import phi_histogram

    for g in (0, 7, 44):
        np.testing.assert_allclose(F[g], phi_histogram(p.rotated(G.rotations[g])), atol=1e-12)


def test_extract_group_feature_is_a_permutation_under_group_rotation():
    # rotating the patch by R_m permutes rows: F'(g) = F(g m)
    p = _patch(2)
    F = extract_group_feature(p, G)
    for m in (3, 29, 58):
        np.testing.assert_allclose(extract_group_feature(p.rotated(G.rotations[m]), G), permute(F, m), atol=1e-12)


def test_embed_prefix_equivariance_all_layers():
    W = init_weights(3)
    f0 = extract_group_feature(_patch(3), G)
    for k in range(5):
        base = embed_prefix(f0, W.embedder, k, G)
        for m in range(ORDER):
            moved = embed_prefix(permute(f0, m), W.embedder, k, G)
            assert np.abs(moved - permute(base, m)).max() <= 1e-6


def test_descriptor_invariance_under_group():
    W = init_weights(4)
    f0 = extract_group_feature(_patch(4), G)
    d = pool_descriptor(embed(f0, W, G))
    assert np.linalg.norm(d) == pytest.approx(1.0)
    for m in range(ORDER):
        assert np.abs(pool_descriptor(embed(permute(f0, m), W, G)) - d).max() <= 1e-9


def test_embed_output_is_frobenius_normalized():
    W = init_weights(5)
    f = embed(np.stack([extract_group_feature(_patch(s), G) for s in range(3)]), W, G)
    np.testing.assert_allclose(np.sqrt(np.sum(f * f, axis=(1, 2))), 1.0, atol=1e-12)


def test_embed_rejects_wrong_width_and_zero_output():
    W = init_weights(0)
    with pytest.raises(ValueError):
        embed(np.zeros((ORDER, 7)), W, G)
    with pytest.raises(DegenerateFeatureError):
        embed(np.zeros((ORDER, 32)), W, G)


def test_layer_chain_validation():
    W = init_weights(0)
    bad = [W.embedder[0], ConvLayer(np.zeros((8, 13, 5)), np.zeros(8))]
    with pytest.raises(ValueError):
        NetworkWeights(bad)


# --- gradients ---------------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_invariant_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    d, dp, neg = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal((4, 6))
    _, (gd, gp, gn) = invariant_loss_grad(d, dp, neg)
    f = lambda: invariant_loss_grad(d, dp, neg)[0]
    assert _rel(gd, _fd(f, d)) <= 1e-4
    assert _rel(gp, _fd(f, dp)) <= 1e-4
    assert _rel(gn, _fd(f, neg)) <= 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, ORDER - 1))
def test_equivariant_loss_gradient(seed, g):
    rng = np.random.default_rng(seed)
    f, fp = rng.standard_normal((ORDER, 3)) * 0.2, rng.standard_normal((ORDER, 3)) * 0.2
    _, (gf, gfp) = equivariant_loss_grad(f, fp, g, G)
    fun = lambda: equivariant_loss_grad(f, fp, g, G)[0]
    assert _rel(gf, _fd(fun, f)) <= 1e-4
    assert _rel(gfp, _fd(fun, fp)) <= 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_descriptor_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    d, dp, neg = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal((3, 4))
    f, fp = rng.standard_normal((ORDER, 2)) * 0.2, rng.standard_normal((ORDER, 2)) * 0.2
    g = int(rng.integers(ORDER))
    _, grads = descriptor_loss_grad(d, dp, neg, f, fp, g, 5.0, G)
    fun = lambda: descriptor_loss(d, dp, neg, f, fp, g, 5.0, G)
    for name, x in (("d", d), ("d_pos", dp), ("negatives", neg), ("f", f), ("f_pos", fp)):
        assert _rel(grads[name], _fd(fun, x)) <= 1e-4, name


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_residual_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    t = rng.standard_normal(4)
    t /= np.linalg.norm(t)
    _, g = residual_loss_grad(q, t)
    assert _rel(g, _fd(lambda: residual_loss_grad(q, t)[0], q)) <= 1e-4


def _small_weights(seed):
    return init_weights(seed, widths=(32, 6, 5), regressor_conv=(4,), regressor_mlp=(3,))


def test_backprop_through_embedder_matches_fd():
    rng = np.random.default_rng(0)
    W = _small_weights(0)
    layers = [ConvLayer(l.weight.astype(np.float64), l.bias.astype(np.float64) + 0.05) for l in W.embedder]
    f0_q = np.stack([extract_group_feature(_patch(s), G) for s in range(3)])
    f0_p = np.stack([extract_group_feature(_patch(s + 10), G) for s in range(3)])
    g = rng.integers(0, ORDER, 3)
    _, grads = batch_descriptor_loss(layers, f0_q, f0_p, g, 5.0, G)
    fun = lambda: batch_descriptor_loss(layers, f0_q, f0_p, g, 5.0, G, need_grad=False)[0]
    for (dW, db), l in zip(grads, layers):
        assert _rel(dW, _fd(fun, l.weight, sample=60)) <= 1e-4
        assert _rel(db, _fd(fun, l.bias)) <= 1e-4


def test_backprop_through_regressor_matches_fd():
    rng = np.random.default_rng(1)
    W = _small_weights(1)
    reg = W.regressor
    for l in reg.conv + reg.mlp:
        l.weight = l.weight.astype(np.float64) + rng.normal(0, 0.1, l.weight.shape)
        l.bias = l.bias.astype(np.float64) + 0.05
    X = rng.uniform(0, 0.3, (2, ORDER, reg.conv[0].n_in))
    T = matrix_to_quat(uniform_rotations(2, rng))

    def loss():
        out = regressor_forward(X, reg, G).out
        return np.mean([residual_loss_grad(out[i], T[i])[0] for i in range(2)])

    cache = regressor_forward(X, reg, G)
    dq = np.stack([residual_loss_grad(cache.out[i], T[i])[1] for i in range(2)]) / 2
    conv_g, mlp_g = regressor_backward(cache, reg, G, dq)
    for (dW, db), l in zip(conv_g + mlp_g, reg.conv + reg.mlp):
        assert _rel(dW, _fd(loss, l.weight)) <= 1e-4
        assert _rel(db, _fd(loss, l.bias)) <= 1e-4


def test_embed_backward_descriptor_only_path():
    W = _small_weights(2)
    layers = [ConvLayer(l.weight.astype(np.float64), l.bias.astype(np.float64) + 0.05) for l in W.embedder]
    f0 = extract_group_feature(_patch(5), G)
    v = np.random.default_rng(2).standard_normal(5)
    c = embed_forward(f0, layers, G)
    grads = embed_backward(c, layers, G, None, v)
    fun = lambda: float(embed_forward(f0, layers, G).desc @ v)
    assert _rel(grads[0][0], _fd(fun, layers[0].weight, sample=60)) <= 1e-4


# --- regressor, quaternions, losses -------------------------------------------------------


def test_untrained_regressor_predicts_identity():
    W = init_weights(0)
    f0p = extract_group_feature(_patch(6), G)
    f0q = extract_group_feature(_patch(7), G)
    X = regressor_input(f0p, embed(f0p, W, G), f0q, embed(f0q, W, G), 5, G)
    np.testing.assert_allclose(regress_residual(X, W.regressor, G), [1.0, 0.0, 0.0, 0.0], atol=1e-7)


def test_quaternion_round_trip():
    R = uniform_rotations(50, np.random.default_rng(0))
    q = matrix_to_quat(R)
    assert np.all(q[:, 0] >= 0)
    np.testing.assert_allclose(quat_to_matrix(q), R, atol=1e-12)
    np.testing.assert_allclose(quat_angle(q, q), 0.0, atol=1e-6)


def test_residual_target_and_loss():
    R = G.rotations[9]
    np.testing.assert_allclose(residual_target(R, 9, G), [1, 0, 0, 0], atol=1e-12)
    assert loss_residual(np.array([1.0, 0, 0, 0]), R, 9, G) == pytest.approx(0.0, abs=1e-12)
    assert loss_residual(np.array([-1.0, 0, 0, 0]), R, 9, G) == pytest.approx(0.0, abs=1e-12)  # sign-invariant
    with pytest.warns(RuntimeWarning):
        loss_residual(np.array([2.0, 0, 0, 0]), R, 9, G)
    with pytest.raises(ValueError):
        loss_residual(np.zeros(4), R, 9, G)


def test_invariant_loss_needs_negatives():
    with pytest.raises(ValueError):
        invariant_loss_grad(np.ones(3), np.ones(3), np.zeros((0, 3)))


# --- weights file -------------------------------------------------------------------------


def test_weights_round_trip(tmp_path):
    W = init_weights(7)
    W.meta["note"] = "x"
    path = tmp_path / "w.icgw"
    save_weights(W, path)
    V = load_weights(path)
    assert V.meta == W.meta
    for a, b in zip(W.embedder + W.regressor.conv, V.embedder + V.regressor.conv):
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)
    for a, b in zip(W.regressor.mlp, V.regressor.mlp):
        np.testing.assert_array_equal(a.weight, b.weight)


def test_weights_without_regressor(tmp_path):
    W = init_weights(1, regressor_conv=None)
    save_weights(W, tmp_path / "w")
    assert load_weights(tmp_path / "w").regressor is None


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
def test_weights_corruption_detected(tmp_path, damage):
    path = tmp_path / "w"
    save_weights(init_weights(0), path)
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "version":
        raw[4] = 9
    elif damage == "truncate":
        raw = raw[:-10]
    else:
        raw += b"\0"
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightsFormatError):
        load_weights(path)


# --- training -----------------------------------------------------------------------------


def _pairs(n, seed=0, exact=True):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        p = _patch(1000 * seed + i)
        g = int(rng.integers(ORDER))
        R = G.rotations[g] if exact else uniform_rotations(1, rng)[0]
        g = quantize_rotation(R)[0]
        out.append(TrainingPair(extract_group_feature(p, G), extract_group_feature(p.rotated(R), G), R, g))
    return out


def test_training_is_deterministic_and_reduces_loss():
    pairs = _pairs(12)
    cfg = TrainConfig(epochs=2, batch_size=6, lr=1e-3, seed=3)
    W1, h1 = train_embedder(pairs, init_weights(0), cfg)
    W2, h2 = train_embedder(pairs, init_weights(0), cfg)
    np.testing.assert_array_equal(W1.embedder[0].weight, W2.embedder[0].weight)
    assert h1.epoch_loss == h2.epoch_loss
    assert len(h1.epoch_loss) == 3
    assert h1.epoch_loss[-1] < h1.epoch_loss[0]
    assert W1.embedder[0].weight.dtype == np.float32
    assert W1.meta["embedder_epochs"] == 2


def test_regressor_training_reduces_loss():
    pairs = _pairs(8, seed=1, exact=False)
    W, h = train_regressor(pairs, init_weights(0), TrainConfig(epochs=3, batch_size=4, lr=1e-2))
    assert h.epoch_loss[-1] < h.epoch_loss[0]
    assert W.meta["regressor_epochs"] == 3


def test_training_needs_two_pairs():
    with pytest.raises(ValueError):
        train_embedder(_pairs(1), init_weights(0), TrainConfig(epochs=1))


def test_zero_learning_rate_leaves_weights_unchanged():
    W0 = init_weights(0)
    W, _ = train_embedder(_pairs(6), W0, TrainConfig(epochs=1, batch_size=3, lr=0.0))
    for a, b in zip(W.embedder, W0.embedder):
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)


def test_one_layer_toy_training_loss_strictly_decreases():
    W0 = init_weights(1, widths=(32, 8))
    _, h = train_embedder(_pairs(50, seed=2, exact=False), W0, TrainConfig(epochs=10, lam=5.0))
    assert np.all(np.diff(h.epoch_loss) < 0)
