import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from icoreg.geom import (
    DegenerateGeometryError,
    RigidTransform,
    apply_transform,
    icp,
    kabsch,
    kabsch_batch,
    local_min_eigenvalue,
    planarity_filter,
    random_transform,
    rmse_between,
    voxel_downsample,
)
from icoreg.icosa import axis_angle_matrix, rotation_angle

seeds = st.integers(0, 2**31 - 1)


def test_apply_identity_and_hand_example():
    P = np.random.default_rng(0).standard_normal((20, 3))
    assert np.abs(apply_transform(RigidTransform.identity(), P) - P).max() <= 1e-12
    T = RigidTransform(axis_angle_matrix([0, 0, 1], np.pi / 2), np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(apply_transform(T, [1.0, 0.0, 0.0]), [0.0, 1.0, 1.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_inverse_round_trip(seed):
    T = random_transform(seed, np.pi, 5.0)
    P = np.random.default_rng(seed).standard_normal((10, 3))
    np.testing.assert_allclose(apply_transform(T.inverse(), apply_transform(T, P)), P, atol=1e-9)
    np.testing.assert_allclose(T.compose(T.inverse()).matrix(), np.eye(4), atol=1e-12)


def test_compose_order():
    a = random_transform(1, np.pi, 1.0)
    b = random_transform(2, np.pi, 1.0)
    P = np.random.default_rng(3).standard_normal((5, 3))
    np.testing.assert_allclose(apply_transform(a.compose(b), P), apply_transform(a, apply_transform(b, P)), atol=1e-12)


def test_from_matrix_round_trip():
    T = random_transform(4, np.pi, 2.0)
    T2 = RigidTransform.from_matrix(T.matrix())
    np.testing.assert_array_equal(T2.rotation, T.rotation)
    np.testing.assert_array_equal(T2.translation, T.translation)
    assert T.is_valid()


def test_kabsch_identity():
    X = np.random.default_rng(0).standard_normal((8, 3))
    T = kabsch(X, X)
    assert rotation_angle(T.rotation) <= 1e-9
    assert np.abs(T.translation).max() <= 1e-12


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_kabsch_recovers_transform_from_triplet(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((3, 3))
    # keep clearly non-degenerate triangles
    area = np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0]))
    if area < 1e-2:
        return
    T = random_transform(rng, np.pi, 3.0)
    est = kabsch(X, apply_transform(T, X))
    assert rotation_angle(est.rotation.T @ T.rotation) <= 1e-9
    np.testing.assert_allclose(est.translation, T.translation, atol=1e-8)


def test_kabsch_noise_residual_within_three_sigma():
    rng = np.random.default_rng(11)
    sigma = 0.01
    for _ in range(100):
        X = rng.standard_normal((50, 3))
        T = random_transform(rng, np.pi, 1.0)
        Y = apply_transform(T, X) + rng.normal(0, sigma, X.shape)
        est = kabsch(X, Y)
        res = np.sqrt(np.mean(np.sum((apply_transform(est, X) - Y) ** 2, axis=1)))
        assert res <= 3 * sigma


def test_kabsch_never_returns_reflection():
    X = np.random.default_rng(2).standard_normal((6, 3))
    Y = X * np.array([1.0, 1.0, -1.0])  # mirror image
    T = kabsch(X, Y)
    assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-12)


def test_kabsch_degenerate_inputs():
    with pytest.raises(DegenerateGeometryError):
        kabsch(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(4.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometryError):
        kabsch(line, line)
    dup = np.array([[1.0, 0, 0]] * 3)
    with pytest.raises(DegenerateGeometryError):
        kabsch(dup, dup)


def test_kabsch_batch_matches_single():
    rng = np.random.default_rng(5)
    src = rng.standard_normal((40, 3, 3))
    dst = rng.standard_normal((40, 3, 3))
    src[0] = np.outer(np.arange(3.0), [1.0, 1.0, 0.0])  # collinear
    R, t, valid = kabsch_batch(src, dst)
    assert not valid[0]
    for k in range(1, 40):
        T = kabsch(src[k], dst[k])
        np.testing.assert_allclose(R[k], T.rotation, atol=1e-9)
        np.testing.assert_allclose(t[k], T.translation, atol=1e-9)


def _dense_cloud(seed=0, n=3000):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-1, 1, (n, 2))
    z = 0.3 * np.sin(3 * xy[:, 0]) * np.cos(2 * xy[:, 1]) + 0.2 * np.exp(-8 * np.sum((xy - 0.3) ** 2, axis=1))
    return np.c_[xy, z]


def test_icp_already_aligned():
    P = _dense_cloud()
    r = icp(P, P, RigidTransform.identity())
    assert r.iterations <= 1
    assert r.rmse == 0.0
    np.testing.assert_allclose(r.transform.rotation, np.eye(3), atol=1e-12)


def test_icp_converges_from_small_offset():
    P = _dense_cloud()
    T_gt = random_transform(3, np.pi, 1.0)
    Q = apply_transform(T_gt, P)
    voxel = 0.05
    for s in range(5):
        d = random_transform(100 + s, np.radians(5.0), 0.1 * 2.0 / np.sqrt(3))
        init = d.compose(T_gt)
        r = icp(P, Q, init, max_iter=100)
        assert r.rmse <= 0.01 * voxel
        assert rmse_between(r.transform, T_gt, P) <= 0.01 * voxel


def test_icp_trace_monotone_and_best_returned():
    P = _dense_cloud(1)
    rng = np.random.default_rng(2)
    Q = apply_transform(random_transform(rng, np.pi, 0.5), P) + rng.normal(0, 0.005, P.shape)
    init = RigidTransform.identity()
    r = icp(P, Q, init, max_iter=30)
    assert np.all(np.diff(r.rmse_trace) <= 1e-12)
    assert r.rmse == pytest.approx(min(r.rmse_trace))
    assert r.rmse <= r.rmse_trace[0]


def test_icp_empty_raises():
    with pytest.raises(ValueError):
        icp(np.zeros((0, 3)), np.zeros((5, 3)))


def test_voxel_downsample_examples():
    P = np.random.default_rng(0).uniform(0, 1, (100, 3))
    assert len(voxel_downsample(P, 10.0)) == 1
    two = np.array([[0.1, 0.1, 0.1], [0.3, 0.2, 0.1]])
    np.testing.assert_allclose(voxel_downsample(two, 1.0), [[0.2, 0.15, 0.1]])
    with pytest.raises(ValueError):
        voxel_downsample(P, 0.0)


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.02, 0.5))
def test_voxel_downsample_properties(seed, voxel):
    P = np.random.default_rng(seed).uniform(-1, 1, (300, 3))
    D = voxel_downsample(P, voxel)
    assert len(D) <= len(P)
    np.testing.assert_array_equal(voxel_downsample(D, voxel), D)  # idempotent
    keys = np.floor(D / voxel).astype(np.int64)
    assert len(np.unique(keys, axis=0)) == len(D)
    # ordered by voxel key
    assert [tuple(k) for k in keys] == sorted(tuple(k) for k in keys)


def test_planarity_filter_plane_vs_ball():
    rng = np.random.default_rng(0)
    plane = np.c_[rng.uniform(-1, 1, (2000, 2)), np.zeros(2000)]
    assert len(planarity_filter(plane, [0, 1, 2], 0.3)) == 0
    ball = rng.normal(0, 0.15, (3000, 3))
    ball[0] = 0.0
    lam = local_min_eigenvalue(ball, [0], 0.3)[0]
    # oracle: eigenvalues of the scaled covariance of the same neighborhood, computed directly
    nb = ball[np.linalg.norm(ball - ball[0], axis=1) < 0.3][1:] / 0.3
    oracle = np.linalg.eigvalsh(np.cov(nb.T, bias=True))
    assert lam == pytest.approx(oracle[0], rel=1e-9)
    assert oracle[0] / oracle[-1] > 0.8
    np.testing.assert_array_equal(planarity_filter(ball, [0], 0.3), [0])


def test_planarity_threshold_zero_keeps_nonempty():
    P = np.array([[0.0, 0, 0], [0.1, 0, 0], [5.0, 5.0, 5.0]])
    np.testing.assert_array_equal(planarity_filter(P, [0, 1, 2], 0.5, 0.0), [0, 1])


def test_random_transform_determinism_and_zero_angle():
    a, b = random_transform(42, np.pi, 1.0), random_transform(42, np.pi, 1.0)
    np.testing.assert_array_equal(a.rotation, b.rotation)
    np.testing.assert_array_equal(a.translation, b.translation)
    z = random_transform(42, 0.0, 1.0)
    np.testing.assert_array_equal(z.rotation, np.eye(3))
    assert np.all(np.abs(z.translation) <= 1.0)


def test_random_transform_angle_uniform():
    rng = np.random.default_rng(0)
    max_angle = 2.0
    ang = np.array([rotation_angle(random_transform(rng, max_angle).rotation) for _ in range(100_000)])
    assert stats.kstest(ang / max_angle, "uniform").pvalue > 0.01
