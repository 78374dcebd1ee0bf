import numpy as np
import pytest

from atlas_cl.charts import (
    VAR_FLOOR,
    Chart,
    ChartAtlas,
    build_atlas,
    chart_score,
    chart_score_grads,
    chart_scores_batch,
    fit_chart,
    soft_assign,
)
from atlas_cl.errors import DegenerateError, ValidationError

from oracles import dense_chart_score


def random_chart(rng, d, r):
    U, _ = np.linalg.qr(rng.standard_normal((d, r)))
    lam = np.sort(rng.uniform(0.1, 3.0, r))[::-1]
    return Chart(rng.standard_normal(d), U, lam, rng.uniform(0.05, 0.5))


def test_fit_chart_recovers_factor():
    rng = np.random.default_rng(0)
    scales = np.array([3.0, 1.0] + [0.1] * 6)
    Z = rng.standard_normal((50, 8)) * scales
    c = fit_chart(Z, 1)
    assert np.linalg.norm(c.mu) <= 0.5
    assert abs(c.basis[0, 0]) >= 0.95
    np.testing.assert_allclose(c.basis.T @ c.basis, np.eye(1), atol=1e-8)


def test_fit_chart_zero_variance():
    c = fit_chart(np.ones((5, 4)), 2)
    np.testing.assert_array_equal(c.factor_vars, [0.0, 0.0])
    assert c.resid_var == VAR_FLOOR


def test_fit_chart_trace_identity():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((40, 6)) @ rng.standard_normal((6, 6))
    c = fit_chart(Z, 2)
    S = np.cov(Z, rowvar=False)
    assert np.trace(c.covariance()) == pytest.approx(np.trace(S), abs=1e-8)


def test_fit_chart_errors():
    with pytest.raises(DegenerateError):
        fit_chart(np.zeros((1, 3)), 1)
    with pytest.raises(ValidationError):
        fit_chart(np.zeros((3, 3)), 3)


def test_score_at_center():
    c = random_chart(np.random.default_rng(2), 6, 2)
    assert chart_score(c, c.mu) == pytest.approx(c.logdet / 6, abs=1e-12)


def test_score_matches_dense_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        c = random_chart(rng, 6, 2)
        z = rng.standard_normal(6) * 2
        assert chart_score(c, z) == pytest.approx(dense_chart_score(c, z), rel=1e-8)


def test_score_quadratic_growth():
    c = random_chart(np.random.default_rng(4), 6, 2)
    base = chart_score(c, c.mu)

    def quad(t):
        return (chart_score(c, c.mu + t * c.basis[:, 0]) - base) * 6

    assert quad(2.0) / quad(1.0) == pytest.approx(4.0, abs=1e-6)
    assert quad(1.0) == pytest.approx(1 / (c.factor_vars[0] + c.resid_var), rel=1e-10)


def test_score_dim_mismatch():
    c = random_chart(np.random.default_rng(5), 4, 1)
    with pytest.raises(ValidationError):
        chart_score(c, np.zeros(5))


def test_score_grads_finite_difference():
    rng = np.random.default_rng(6)
    charts = [random_chart(rng, 5, 2), random_chart(rng, 5, 1)]
    Z = rng.standard_normal((3, 5))
    G = chart_score_grads(charts, Z)
    h = 1e-6
    for i in range(3):
        for j in range(5):
            Zp, Zm = Z.copy(), Z.copy()
            Zp[i, j] += h
            Zm[i, j] -= h
            num = (chart_scores_batch(charts, Zp)[i] - chart_scores_batch(charts, Zm)[i]) / (2 * h)
            np.testing.assert_allclose(G[i, :, j], num, rtol=1e-6, atol=1e-8)


def test_soft_assign_cases():
    rng = np.random.default_rng(7)
    c = random_chart(rng, 4, 1)
    assert soft_assign(ChartAtlas((c,)), rng.standard_normal(4))[0] == 1.0
    p = soft_assign(ChartAtlas((c, c)), rng.standard_normal(4))
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-12)


def test_soft_assign_low_temperature():
    rng = np.random.default_rng(8)
    a, b = random_chart(rng, 4, 1), random_chart(rng, 4, 1)
    atlas = ChartAtlas((a, b), tau_c=0.01)
    z = a.mu
    s = atlas.scores(z)[0]
    assert abs(s[0] - s[1]) >= 1
    p = soft_assign(atlas, z)
    assert p.max() >= 0.99 and np.argmax(p) == np.argmin(s)


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(9)
    sigma = 0.3
    A = rng.standard_normal((60, 4)) * sigma
    B = rng.standard_normal((60, 4)) * sigma + 5.0
    return np.vstack([A, B]), sigma


def test_build_atlas_recovers_blobs(blobs):
    Z, sigma = blobs
    fit = build_atlas(Z, 2, 1, 1.0, seed=0)
    for chart in fit.atlas.charts:
        members = Z[(np.abs(Z - chart.mu).sum(1)) < 3]
        target = members.mean(0)
        assert np.linalg.norm(chart.mu - target) <= 3 * sigma / np.sqrt(60)
    hard = np.argmax(fit.atlas.assign(Z), axis=1)
    assert np.mean(hard == fit.assignments) >= 0.95


def test_build_atlas_deterministic(blobs):
    Z, _ = blobs
    a = build_atlas(Z, 3, 2, 1.0, seed=4)
    b = build_atlas(Z, 3, 2, 1.0, seed=4)
    assert a.atlas.to_json() == b.atlas.to_json()
    np.testing.assert_array_equal(a.assignments, b.assignments)


def test_build_atlas_merges_tiny_clusters():
    rng = np.random.default_rng(10)
    Z = np.vstack([rng.standard_normal((40, 3)), [[30.0, 30.0, 30.0]]])
    fit = build_atlas(Z, 2, 2, 1.0, seed=0)
    assert fit.atlas.n_charts == 1
    assert set(fit.assignments) == {0}


def test_build_atlas_too_few_points():
    with pytest.raises(ValidationError):
        build_atlas(np.zeros((3, 2)), 2, 1, 1.0, 0)


def test_atlas_is_frozen(blobs):
    fit = build_atlas(blobs[0], 2, 1, 1.0, 0)
    with pytest.raises(ValueError):
        fit.atlas.charts[0].mu[0] = 1.0
    with pytest.raises(AttributeError):
        fit.atlas.tau_c = 2.0


def test_atlas_json_roundtrip(blobs):
    atlas = build_atlas(blobs[0], 2, 2, 0.5, 0).atlas
    back = ChartAtlas.from_json(atlas.to_json())
    assert back.to_json() == atlas.to_json()
    np.testing.assert_array_equal(back.scores(blobs[0]), atlas.scores(blobs[0]))
