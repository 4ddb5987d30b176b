import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lodada.localize import (REJECTED, ClusterModel, acceptance_threshold, assign_source,
                             cluster_counts, kmeans_fit, nearest_centroid, union_localize)


def blobs(seed=0, n=200, std=0.1):
    r = np.random.default_rng(seed)
    X = np.vstack([r.normal(-10, std, size=(n, 2)), r.normal(10, std, size=(n, 2))])
    return X, np.repeat([0, 1], n)


def test_single_cluster_is_the_mean(rng):
    X = rng.normal(size=(50, 3))
    m = kmeans_fit(X, 1, seed=0)
    np.testing.assert_allclose(m.centroids[0], X.mean(axis=0), atol=1e-12)
    assert m.radii[0] == pytest.approx(np.linalg.norm(X - X.mean(0), axis=1).max())


def test_one_cluster_per_point(rng):
    X = rng.normal(size=(12, 2))
    m = kmeans_fit(X, 12, seed=3)
    assert sorted(map(tuple, m.centroids)) == sorted(map(tuple, X))
    np.testing.assert_array_equal(m.radii, 0.0)


def test_separated_blobs_are_pure():
    X, y = blobs()
    m = kmeans_fit(X, 2, seed=0)
    for k in range(2):
        frac = np.bincount(y[m.labels == k], minlength=2).max() / np.sum(m.labels == k)
        assert frac >= 0.99


def test_k_larger_than_points():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((3, 2)), 0)


@given(st.integers(0, 5000), st.integers(1, 8))
def test_model_invariants(seed, K):
    r = np.random.default_rng(seed)
    X = r.normal(size=(40, 2)) * r.uniform(0.1, 3.0)
    m = kmeans_fit(X, K, seed=seed)
    # each point is in exactly one cluster and within that cluster's radius
    assert m.labels.shape == (40,)
    dist = np.linalg.norm(X - m.centroids[m.labels], axis=1)
    assert np.all(dist <= m.radii[m.labels] + 1e-12)
    assert m.mean_radius == pytest.approx(m.radii.mean())
    h = np.asarray(m.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))


def test_duplicate_points_still_fill_every_cluster():
    X = np.vstack([np.zeros((10, 2)), np.ones((2, 2))])
    m = kmeans_fit(X, 3, seed=0)
    assert m.K == 3 and np.all(np.isfinite(m.centroids))


def test_same_seed_same_model(rng):
    X = rng.normal(size=(300, 2))
    a, b = kmeans_fit(X, 5, seed=11), kmeans_fit(X, 5, seed=11)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


def test_nearest_centroid_tie_goes_to_lower_index():
    idx, d = nearest_centroid(np.array([[0.0]]), np.array([[1.0], [-1.0]]))
    assert idx[0] == 0 and d[0] == 1.0


def _model():
    # two clusters with hand-picked members: radii 1 and 3, mean radius 2
    X = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [10.0, 0.0], [13.0, 0.0], [7.0, 0.0]])
    m = kmeans_fit(X, 2, seed=0)
    assert sorted(m.radii.tolist()) == [1.0, 3.0]
    return m


def test_assign_source_threshold_arithmetic():
    m = _model()
    c0 = int(np.argmin(m.centroids[:, 0]))
    thr = acceptance_threshold(m, 1.5)
    assert thr == pytest.approx(3.0)
    src = np.array([m.centroids[c0], m.centroids[c0] + [0.0, 4.0]])  # distance 0 and 2*mean radius
    a = assign_source(m, src, 1.5)
    assert a.cluster[0] == c0 and a.distance[0] == 0.0
    assert a.cluster[1] == REJECTED
    assert np.all(assign_source(m, src * 100, 1e12).accepted)
    assert assign_source(m, src * 100, float("inf")).n_accepted == 2
    with pytest.raises(ValueError):
        assign_source(m, src, 0.0)


@given(st.integers(0, 1000), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_acceptance_is_monotone_in_delta(seed, d1, d2):
    lo, hi = sorted((d1, d2))
    r = np.random.default_rng(seed)
    m = kmeans_fit(r.normal(size=(60, 2)), 4, seed=seed)
    src = r.normal(scale=2.0, size=(100, 2))
    a, b = assign_source(m, src, lo), assign_source(m, src, hi)
    assert np.all(~a.accepted | b.accepted)
    assert np.all(a.distance[a.accepted] <= a.threshold)


def test_cluster_counts_hand_example():
    m = _model()
    c0 = int(np.argmin(m.centroids[:, 0]))
    src = np.array([[0.5, 0.0], [0.2, 0.1], [11.0, 0.0], [50.0, 0.0]])
    n0, n1 = cluster_counts(m, assign_source(m, src, 1.5), n_target=6)
    assert n1[c0] == 3 and n1[1 - c0] == 3
    assert n0[c0] == 2 and n0[1 - c0] == 1


@given(st.integers(0, 1000))
def test_cluster_counts_conserve(seed):
    r = np.random.default_rng(seed)
    tar = r.normal(size=(80, 2))
    m = kmeans_fit(tar, 5, seed=seed)
    a = assign_source(m, r.normal(scale=3.0, size=(120, 2)), 1.0)
    n0, n1 = cluster_counts(m, a)
    assert n1.sum() == 80 and n0.sum() == a.n_accepted


def test_no_source_accepted():
    m = _model()
    n0, _ = cluster_counts(m, assign_source(m, np.array([[1e6, 1e6]]), 1.5))
    np.testing.assert_array_equal(n0, 0)


def test_json_roundtrip(tmp_path, rng):
    X = rng.normal(size=(100, 2))
    m = kmeans_fit(X, 4, seed=2)
    m.save(tmp_path / "m.json")
    back = ClusterModel.from_json(json.loads((tmp_path / "m.json").read_text()), X)
    np.testing.assert_array_equal(back.centroids, m.centroids)
    np.testing.assert_array_equal(back.radii, m.radii)
    np.testing.assert_array_equal(back.labels, m.labels)
    assert back.seed == 2


def test_union_variant_shapes(rng):
    tar, src = rng.normal(size=(50, 2)), rng.normal(size=(70, 2))
    m, a = union_localize(tar, src, 3, 1.5, seed=0)
    assert m.labels.shape == (50,) and a.cluster.shape == (70,)
    assert np.all(a.cluster[a.accepted] < 3)
