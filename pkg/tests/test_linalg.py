import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atlas_cl.errors import DegenerateError, ValidationError
from atlas_cl.linalg import kmeans, pairwise_euclidean, pearson, softmax_temp, top_r_eigen

from oracles import jacobi_eigh, loop_distances, loop_pearson


def test_pairwise_two_points():
    np.testing.assert_array_equal(pairwise_euclidean([[0.0], [3.0]]), [[0, 3], [3, 0]])


def test_pairwise_matches_loop():
    X = np.random.default_rng(1).standard_normal((5, 3))
    D = pairwise_euclidean(X)
    np.testing.assert_allclose(D, loop_distances(X.tolist()), atol=1e-12, rtol=0)
    assert np.all(np.diag(D) == 0)
    np.testing.assert_array_equal(D, D.T)


def test_pairwise_rejects_nan():
    with pytest.raises(ValidationError):
        pairwise_euclidean([[0.0, np.nan]])


def test_pairwise_orthogonal_and_scale():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((12, 4))
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    D = pairwise_euclidean(X)
    np.testing.assert_allclose(pairwise_euclidean(X @ Q), D, atol=1e-9)
    np.testing.assert_allclose(pairwise_euclidean(2.5 * X), 2.5 * D, atol=1e-9)


def test_eigen_diagonal():
    res = top_r_eigen(np.diag([4.0, 1.0]), 1)
    assert res.values[0] == pytest.approx(4.0)
    assert abs(res.vectors[0, 0]) == pytest.approx(1.0)


def test_eigen_degenerate_identity():
    res = top_r_eigen(np.eye(3), 2)
    np.testing.assert_allclose(res.values, [1.0, 1.0])
    np.testing.assert_allclose(res.vectors.T @ res.vectors, np.eye(2), atol=1e-8)


def test_eigen_matches_jacobi():
    A = np.random.default_rng(3).standard_normal((6, 4))
    S = A.T @ A
    res = top_r_eigen(S, 3)
    ref_vals, _ = jacobi_eigh(S)
    np.testing.assert_allclose(res.values, ref_vals[:3], atol=1e-8)
    for lam, v in zip(res.values, res.vectors.T):
        assert np.linalg.norm(S @ v - lam * v) <= 1e-6 * max(1.0, lam)
    assert np.all(np.diff(res.values) <= 0)


def test_eigen_full_reconstruction():
    A = np.random.default_rng(4).standard_normal((9, 5))
    S = A.T @ A
    res = top_r_eigen(S, 5)
    recon = (res.vectors * res.values) @ res.vectors.T
    assert np.linalg.norm(S - recon) <= np.linalg.norm(S) * 1e-6


def test_eigen_deterministic():
    A = np.random.default_rng(5).standard_normal((20, 8))
    S = A.T @ A
    a, b = top_r_eigen(S, 3), top_r_eigen(S, 3)
    np.testing.assert_array_equal(a.vectors, b.vectors)


def test_eigen_rejects_asymmetric():
    with pytest.raises(ValidationError):
        top_r_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]), 1)


def test_eigen_zero_matrix():
    res = top_r_eigen(np.zeros((4, 4)), 2)
    np.testing.assert_array_equal(res.values, [0.0, 0.0])


def test_softmax_symmetric_and_hand_value():
    np.testing.assert_allclose(softmax_temp([2.0, 2.0, 2.0], 0.7), [1 / 3] * 3, atol=1e-12)
    np.testing.assert_allclose(softmax_temp([0.0, math.log(3)], 1.0), [0.25, 0.75], atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(0.05, 10), st.booleans())
@settings(max_examples=50, deadline=None)
def test_softmax_shift_invariant(scores, tau, negate):
    p = softmax_temp(scores, tau, negate)
    q = softmax_temp(np.asarray(scores) + 1000.0, tau, negate)
    np.testing.assert_allclose(p, q, atol=1e-12)
    assert abs(p.sum() - 1) <= 1e-12 and np.all(p >= 0)


def test_softmax_rejects_bad_tau():
    with pytest.raises(ValidationError):
        softmax_temp([1.0], 0.0)


def test_pearson_basic():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_pearson_matches_loop():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    assert pearson(a, b) == pytest.approx(loop_pearson(a.tolist(), b.tolist()), abs=1e-12)


def test_pearson_zero_variance():
    with pytest.raises(DegenerateError):
        pearson([1, 1, 1], [1, 2, 3])


@given(st.floats(0.01, 100), st.floats(-100, 100))
@settings(max_examples=30, deadline=None)
def test_pearson_affine(p, q):
    a = np.random.default_rng(7).standard_normal(10)
    assert pearson(a, p * a + q) == pytest.approx(1.0, abs=1e-10)


def test_kmeans_saturated():
    X = np.random.default_rng(8).standard_normal((6, 2))
    res = kmeans(X, 6, seed=0)
    assert res.history[-1] == 0.0
    np.testing.assert_allclose(np.sort(res.centers, axis=0), np.sort(X, axis=0))


def test_kmeans_two_blobs():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    res = kmeans(X, 2, seed=3)
    got = sorted(map(tuple, res.centers))
    assert got == [(0.0, 0.5), (10.0, 10.5)]


def test_kmeans_monotone_and_optimal():
    X = np.random.default_rng(9).standard_normal((30, 2))
    res = kmeans(X, 3, seed=11)
    assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))
    d2 = ((X[:, None, :] - res.centers[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(res.assignments, np.argmin(d2, axis=1))


def test_kmeans_deterministic_and_errors():
    X = np.random.default_rng(10).standard_normal((20, 3))
    a, b = kmeans(X, 4, seed=5), kmeans(X, 4, seed=5)
    np.testing.assert_array_equal(a.centers, b.centers)
    with pytest.raises(ValidationError):
        kmeans(X, 21, seed=0)


def test_kmeans_duplicate_points_no_empty_cluster():
    X = np.vstack([np.zeros((5, 2)), np.ones((1, 2))])
    res = kmeans(X, 3, seed=0)
    assert set(res.assignments) == {0, 1, 2}
    assert np.all(np.isfinite(res.centers))
