import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icoreg.geom import RigidTransform, apply_transform, random_transform
from icoreg.icosa import get_group, quantize_rotation, rotation_angle
from icoreg.ransac import (
    CRVFallbackWarning,
    Correspondences,
    InsufficientCorrespondencesError,
    RansacConfig,
    count_inliers,
    crv_buckets,
    crv_keys,
    generate_hypotheses,
    run_ransac,
    score_hypotheses,
    triplet_indices,
)
from icoreg.ransac import _distinct_triplets

G = get_group()


def synthetic(n, alpha, seed, rotations=True):
    """``n`` correspondences, a fraction ``alpha`` correct, with exact rotations on the inliers."""
    rng = np.random.default_rng(seed)
    T = random_transform(rng, np.pi, 1.0)
    p = rng.uniform(-1, 1, (n, 3))
    q = apply_transform(T, p)
    good = np.zeros(n, bool)
    good[rng.choice(n, int(round(alpha * n)), replace=False)] = True
    q[~good] = rng.uniform(-2, 2, ((~good).sum(), 3))
    coarse = rng.integers(0, 60, n)
    g_true = quantize_rotation(T.rotation)[0]
    coarse[good] = g_true
    refined = None
    if rotations:
        refined = np.stack([T.rotation if k else random_transform(rng, np.pi).rotation for k in good])
    return Correspondences(p, q, coarse, refined), T, good


def test_config_validation():
    with pytest.raises(ValueError):
        RansacConfig(mode="magic")
    with pytest.raises(ValueError):
        RansacConfig(max_iterations=0)
    with pytest.raises(ValueError):
        RansacConfig(inlier_threshold=0.0)


def test_distinct_triplets_are_distinct_and_uniform():
    u = np.random.default_rng(0).random((60000, 3))
    t = _distinct_triplets(u, 5)
    assert np.all((t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2]))
    assert t.min() == 0 and t.max() == 4
    # every ordered triplet of 5 items (60 of them) is equally likely
    _, counts = np.unique(t, axis=0, return_counts=True)
    assert len(counts) == 60
    assert counts.std() / counts.mean() < 0.05


@pytest.mark.parametrize("mode", ["vanilla", "crv", "ose"])
def test_all_inliers_recover_exactly(mode):
    C, T, _ = synthetic(30, 1.0, 1)
    res = run_ransac(C, RansacConfig(mode=mode, max_iterations=50, seed=3))
    assert rotation_angle(res.transform.rotation.T @ T.rotation) < 1e-6
    assert res.inlier_count == 30
    assert res.mode == mode


@pytest.mark.parametrize("mode", ["vanilla", "crv", "ose"])
def test_recovers_with_outliers(mode):
    C, T, good = synthetic(200, 0.3, 2)
    res = run_ransac(C, RansacConfig(mode=mode, max_iterations=1000, seed=4))
    assert rotation_angle(res.transform.rotation.T @ T.rotation) < 1e-6
    assert set(np.flatnonzero(good)) <= set(res.inlier_indices)


def test_insufficient_correspondences():
    C, _, _ = synthetic(2, 1.0, 0)
    with pytest.raises(InsufficientCorrespondencesError):
        run_ransac(C, RansacConfig(mode="vanilla"))
    res = run_ransac(C, RansacConfig(mode="ose"))
    assert res.hypotheses_evaluated == 2
    empty = Correspondences(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int))
    with pytest.raises(InsufficientCorrespondencesError):
        run_ransac(empty, RansacConfig(mode="ose"))


def test_hypothesis_stream_is_prefix_stable():
    C, _, _ = synthetic(100, 0.2, 5)
    for mode in ("vanilla", "crv"):
        a = generate_hypotheses(C, RansacConfig(mode=mode, max_iterations=100, seed=9))
        b = generate_hypotheses(C, RansacConfig(mode=mode, max_iterations=400, seed=9))
        np.testing.assert_array_equal(a.rotations, b.rotations[:100])
    a = generate_hypotheses(C, RansacConfig(mode="ose", max_iterations=10, seed=9))
    b = generate_hypotheses(C, RansacConfig(mode="ose", max_iterations=50, seed=9))
    np.testing.assert_array_equal(a.translations, b.translations[:10])


def test_ose_budget_capped_by_correspondences():
    C, _, _ = synthetic(40, 0.5, 6)
    assert len(generate_hypotheses(C, RansacConfig(mode="ose", max_iterations=1000))) == 40


def test_ose_falls_back_to_coarse_where_refined_missing():
    C, T, good = synthetic(20, 1.0, 7)
    C.refined[:10] = np.nan
    H = generate_hypotheses(C, RansacConfig(mode="ose", max_iterations=20, seed=0))
    order = np.random.default_rng(0).permutation(20)
    for k, i in enumerate(order):
        expect = G.rotations[C.coarse[i]] if i < 10 else T.rotation
        np.testing.assert_allclose(H.rotations[k], expect, atol=1e-12)


def test_crv_samples_within_buckets():
    C, _, _ = synthetic(300, 0.1, 8)
    idx, fallback = triplet_indices(C, RansacConfig(mode="crv", max_iterations=500, seed=1))
    assert not fallback
    c = crv_keys(C)[idx]
    assert np.all((c[:, 0] == c[:, 1]) & (c[:, 1] == c[:, 2]))


def test_crv_keys_follow_refined_rotations():
    C, T, good = synthetic(20, 1.0, 11)
    C.coarse[:] = (C.coarse + 1) % 60  # coarse cells all wrong, refined rotations exact
    np.testing.assert_array_equal(crv_keys(C), quantize_rotation(T.rotation)[0])
    C.refined[:5] = np.nan  # rows without a refined rotation keep their coarse cell
    np.testing.assert_array_equal(crv_keys(C)[:5], C.coarse[:5])
    C.refined = None
    np.testing.assert_array_equal(crv_keys(C), C.coarse)


def test_crv_bucket_weights():
    members, w = crv_buckets(np.array([0, 0, 0, 0, 1, 1, 2, 2, 2]))
    assert [len(m) for m in members] == [4, 3]
    np.testing.assert_array_equal(w, [4, 1])


def test_crv_fallback_warns():
    p = np.random.default_rng(0).standard_normal((5, 3))
    C = Correspondences(p, p, np.arange(5))
    with pytest.warns(CRVFallbackWarning):
        res = run_ransac(C, RansacConfig(mode="crv", max_iterations=20))
    assert res.fallback and "crv-fallback-to-vanilla" in res.warnings


def test_all_degenerate_returns_identity_with_note():
    p = np.outer(np.arange(6.0), [1.0, 0.0, 0.0])
    C = Correspondences(p, p + 1.0)
    res = run_ransac(C, RansacConfig(mode="vanilla", max_iterations=20))
    assert "no-valid-hypothesis" in res.warnings
    np.testing.assert_array_equal(res.transform.rotation, np.eye(3))


def test_ties_go_to_earliest_hypothesis():
    C, _, _ = synthetic(50, 0.0, 9)
    res = run_ransac(C, RansacConfig(mode="ose", max_iterations=50, refit=False, seed=2))
    counts = score_hypotheses(generate_hypotheses(C, RansacConfig(mode="ose", max_iterations=50, seed=2)), C, 0.1)
    assert res.best_hypothesis == int(np.flatnonzero(counts == counts.max())[0])


def test_refit_never_reduces_inliers():
    for seed in range(10):
        C, _, _ = synthetic(100, 0.3, seed)
        C.q[:] += np.random.default_rng(seed).normal(0, 0.03, C.q.shape)
        a = run_ransac(C, RansacConfig(mode="ose", refit=False, seed=seed))
        b = run_ransac(C, RansacConfig(mode="ose", refit=True, seed=seed))
        assert b.inlier_count >= a.inlier_count


def test_distance_check_invalidates_inconsistent_triplets():
    C, _, good = synthetic(100, 0.0, 10)
    H = generate_hypotheses(C, RansacConfig(mode="vanilla", max_iterations=300, distance_check=True))
    assert H.valid.mean() < 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0))
def test_count_inliers_matches_definition(seed, tau):
    rng = np.random.default_rng(seed)
    p, q = rng.uniform(-1, 1, (40, 3)), rng.uniform(-1, 1, (40, 3))
    T = random_transform(rng, np.pi, 0.5)
    got = count_inliers(T, Correspondences(p, q), tau)
    expect = np.flatnonzero(np.linalg.norm(apply_transform(T, p) - q, axis=1) <= tau)
    np.testing.assert_array_equal(got, expect)


def test_from_list_round_trip():
    from icoreg.matchrot import Correspondence

    L = [Correspondence(0, 0, np.zeros(3), np.ones(3), 0.1, 3, None), Correspondence(1, 1, np.ones(3), np.zeros(3), 0.2, 4, np.eye(3))]
    C = Correspondences.from_list(L)
    np.testing.assert_array_equal(C.coarse, [3, 4])
    assert np.isnan(C.refined[0]).all()
    np.testing.assert_array_equal(C.refined[1], np.eye(3))
