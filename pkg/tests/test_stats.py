import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import jensenshannon
from sklearn.metrics import roc_auc_score

from conservattack import stats
from conservattack.exceptions import DataError


def _dist(k):
    return arrays(np.float64, k, elements=st.floats(0, 1, allow_nan=False)).filter(lambda a: a.sum() > 1e-6).map(
        lambda a: a / a.sum())


def _textbook_dcor(x, y):
    """Distance correlation straight from the double-centering definition."""
    n = len(x)

    def centered(v):
        d = np.array([[abs(v[i] - v[j]) for j in range(n)] for i in range(n)])
        return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()

    A, B = centered(x), centered(y)
    dcov2 = (A * B).sum() / n ** 2
    dvar = math.sqrt((A * A).sum() / n ** 2 * (B * B).sum() / n ** 2)
    return math.sqrt(max(dcov2, 0.0) / dvar)


# -- JSD -------------------------------------------------------------------------


def test_jsd_identity_and_disjoint():
    p = np.array([0.2, 0.3, 0.5])
    assert stats.jsd(p, p) == 0.0
    assert stats.jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-15)


def test_jsd_matches_scipy():
    r = np.random.default_rng(0)
    for _ in range(50):
        p, q = r.dirichlet(np.ones(12)), r.dirichlet(np.ones(12) * 0.3)
        assert stats.jsd(p, q) == pytest.approx(jensenshannon(p, q, base=2), abs=1e-12)


def test_jsd_rejects_bad_input():
    with pytest.raises(DataError):
        stats.jsd([0.5, 0.5], [1.0])
    with pytest.raises(DataError):
        stats.jsd([0.7, 0.7], [0.5, 0.5])
    with pytest.raises(DataError):
        stats.jsd([1.5, -0.5], [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(_dist(8), _dist(8))
def test_jsd_symmetric_and_bounded(p, q):
    a, b = stats.jsd(p, q), stats.jsd(q, p)
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 1.0 + 1e-12


@settings(max_examples=60, deadline=None)
@given(_dist(6), _dist(6), _dist(6))
def test_jsd_triangle_inequality(p, q, r):
    assert stats.jsd(p, r) <= stats.jsd(p, q) + stats.jsd(q, r) + 1e-9


# -- delta FN --------------------------------------------------------------------


def test_delta_fn_cases():
    eye = np.eye(2)
    assert stats.delta_fn(eye, eye) == 0.0
    # ||[[0,1],[1,0]]||_F = sqrt(2) = ||I||_F
    assert stats.delta_fn(eye, np.ones((2, 2))) == pytest.approx(1.0, abs=1e-15)


def test_delta_fn_rejects_zero_norm_and_mismatch():
    with pytest.raises(DataError):
        stats.delta_fn(np.zeros((2, 2)), np.eye(2))
    with pytest.raises(DataError):
        stats.delta_fn(np.eye(2), np.eye(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_delta_fn_permutation_invariant(d, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(d, d)), r.normal(size=(d, d))
    a, b = a + a.T + np.eye(d) * 5, b + b.T
    perm = r.permutation(d)
    ap, bp = a[np.ix_(perm, perm)], b[np.ix_(perm, perm)]
    assert stats.delta_fn(ap, bp) == pytest.approx(stats.delta_fn(a, b), rel=1e-12)


# -- fooling ratio and AUROC -----------------------------------------------------


def test_fooling_ratio():
    assert stats.fooling_ratio([0, 1, 1], [0, 1, 1]) == 0.0
    assert stats.fooling_ratio([0, 1, 1], [1, 0, 0]) == 1.0
    assert stats.fooling_ratio([0, 0, 0, 0], [0, 1, 0, 1]) == 0.5
    with pytest.raises(DataError):
        stats.fooling_ratio([0, 1], [0])


def test_auroc_matches_sklearn_with_ties():
    r = np.random.default_rng(3)
    s = r.integers(0, 5, size=400).astype(float)
    y = r.integers(0, 2, size=400)
    assert stats.auroc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)


def test_auroc_edge_cases():
    assert stats.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    s = np.random.default_rng(1).normal(size=10_000)
    assert stats.auroc(s, (s > np.median(s)).astype(int)) == 1.0
    with pytest.raises(DataError):
        stats.auroc([0.1, 0.2], [1, 1])


def test_auroc_uninformative_is_half():
    r = np.random.default_rng(5)
    assert abs(stats.auroc(r.normal(size=10_000), r.integers(0, 2, 10_000)) - 0.5) < 0.02


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_auroc_antisymmetry(seed):
    r = np.random.default_rng(seed)
    s = r.normal(size=50).round(1)
    y = np.r_[0, 1, r.integers(0, 2, 48)]
    assert abs(stats.auroc(s, y) + stats.auroc(-s, y) - 1.0) < 1e-12


# -- distance correlation --------------------------------------------------------


def test_dcor_matches_textbook_definition():
    r = np.random.default_rng(2)
    x = r.normal(size=40)
    y = x ** 2 + 0.3 * r.normal(size=40)
    assert stats.distance_correlation(x, y) == pytest.approx(_textbook_dcor(x, y), abs=1e-12)


def test_dcor_identity_and_constant():
    x = np.random.default_rng(0).normal(size=300)
    assert stats.distance_correlation(x, x) == 1.0
    assert stats.distance_correlation(x, np.full(300, 2.0)) == 0.0


def test_dcor_detects_quadratic_dependence():
    r = np.random.default_rng(11)
    x = r.uniform(-1, 1, 2000)
    y = x ** 2
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.1
    assert stats.distance_correlation(x, y) > 0.3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.floats(-5, 5).filter(lambda v: abs(v) > 0.1),
       st.floats(-5, 5).filter(lambda v: abs(v) > 0.1), st.floats(-10, 10), st.floats(-10, 10))
def test_dcor_affine_invariance(seed, a, c, b, e):
    r = np.random.default_rng(seed)
    x = r.normal(size=60)
    y = np.sin(x) + 0.5 * r.normal(size=60)
    assert stats.distance_correlation(a * x + b, c * y + e) == pytest.approx(
        stats.distance_correlation(x, y), abs=1e-9)


def test_dcor_matrix_equals_pairwise_calls():
    r = np.random.default_rng(4)
    X = r.normal(size=(150, 3))
    X[:, 2] = X[:, 0] ** 2
    M = stats.dcor_matrix(X, subsample_cap=1000)
    for j in range(3):
        for k in range(3):
            expect = 1.0 if j == k else stats.distance_correlation(X[:, j], X[:, k])
            assert M[j, k] == pytest.approx(expect, abs=1e-12)
    assert np.array_equal(M, M.T)


def test_dcor_matrix_independent_and_duplicate_features():
    r = np.random.default_rng(8)
    X = r.normal(size=(4000, 2))
    assert stats.dcor_matrix(X, 2000)[0, 1] < 0.1
    X[:, 1] = X[:, 0]
    assert stats.dcor_matrix(X, 2000)[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_dcor_subsample_is_seeded():
    X = np.random.default_rng(0).normal(size=(500, 2))
    assert np.array_equal(stats.dcor_matrix(X, 100, seed=3), stats.dcor_matrix(X, 100, seed=3))
    assert not np.array_equal(stats.dcor_matrix(X, 100, seed=3), stats.dcor_matrix(X, 100, seed=4))


# -- histograms ------------------------------------------------------------------


def test_histogram_invariants_and_clamping():
    r = np.random.default_rng(0)
    X = r.uniform(0, 1, size=(333, 4))
    h = stats.FeatureHistogram.from_matrix(X, 17, np.tile([0.0, 1.0], (4, 1)))
    q = h.normalized
    assert np.allclose(q.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(q * 333, np.round(q * 333), atol=1e-9)
    assert h.bin_index(0, -5.0) == 0 and h.bin_index(0, 9.0) == 16
    assert h.bin_index(0, 1.0) == 16


def test_histogram_bin_index_many_agrees():
    r = np.random.default_rng(1)
    X = r.normal(size=(200, 3))
    h = stats.FeatureHistogram.from_matrix(X, 23)
    feats = r.integers(0, 3, 500)
    vals = r.normal(size=500) * 2
    many = h.bin_index_many(feats, vals)
    one = np.array([h.bin_index(f, v) for f, v in zip(feats, vals)])
    assert np.array_equal(many, one)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_histogram_incremental_equals_recount(seed, bins):
    r = np.random.default_rng(seed)
    X = r.normal(size=(60, 3))
    bounds = np.column_stack([X.min(0), X.max(0)])
    h = stats.FeatureHistogram.from_matrix(X, bins, bounds)
    for _ in range(100):
        i, j = r.integers(60), r.integers(3)
        new = r.normal() * 1.5
        h.apply_cell_change(j, X[i, j], new)
        X[i, j] = new
    fresh = stats.FeatureHistogram.from_matrix(X, bins, bounds)
    assert np.array_equal(h.counts, fresh.counts)


# -- Pearson incremental ---------------------------------------------------------


def test_correlation_state_matches_numpy():
    X = np.random.default_rng(0).normal(size=(80, 5))
    cs = stats.CorrelationState.from_matrix(X)
    assert np.allclose(cs.corr, np.corrcoef(X, rowvar=False), atol=1e-12)
    assert np.all(np.diag(cs.corr) == 1.0)


def test_zero_variance_feature_gets_identity_pattern():
    X = np.random.default_rng(0).normal(size=(50, 3))
    X[:, 1] = 4.0
    cs = stats.CorrelationState.from_matrix(X)
    assert list(cs.degenerate) == [1]
    assert cs.corr[1, 1] == 1.0 and cs.corr[1, 0] == 0.0 and cs.corr[2, 1] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pearson_incremental_equals_recompute(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(40, 4))
    cs = stats.CorrelationState.from_matrix(X)
    for _ in range(200):
        i, j = r.integers(40), r.integers(4)
        new = r.normal() * 2
        cs.apply_cell_change(X[i].copy(), j, new)
        X[i, j] = new
    assert np.allclose(cs.corr, np.corrcoef(X, rowvar=False), atol=1e-10)
    assert np.allclose(cs.mean, X.mean(0), atol=1e-12)


def test_candidate_rows_match_applied_update():
    r = np.random.default_rng(2)
    X = r.normal(size=(30, 4))
    cs = stats.CorrelationState.from_matrix(X)
    cands = r.normal(size=7)
    rows = cs.candidate_corr_rows(X[3], 2, cands)
    for c, row in zip(cands, rows):
        Y = X.copy()
        Y[3, 2] = c
        assert np.allclose(row, np.corrcoef(Y, rowvar=False)[2], atol=1e-12)
    multi = cs.candidate_corr_rows(X[3], np.array([0, 2, 3]), np.array([0.1, 0.2, 0.3]))
    for k, (j, c) in enumerate(zip((0, 2, 3), (0.1, 0.2, 0.3))):
        assert np.allclose(multi[k], cs.candidate_corr_rows(X[3], j, [c])[0], atol=0)


# -- distance-correlation incremental -------------------------------------------


def test_dcor_state_incremental_matches_recompute():
    r = np.random.default_rng(6)
    X = r.normal(size=(90, 3))
    X[:, 2] = X[:, 0] ** 2 + 0.1 * r.normal(size=90)
    st_ = stats.DistanceCorrelationState(X, subsample_cap=60, seed=1)
    for _ in range(60):
        i, j = r.integers(90), r.integers(3)
        new = r.normal()
        cand = st_.candidate_corr_rows(i, j, [new])[0]
        st_.apply_cell_change(i, j, new)
        X[i, j] = new
        assert np.allclose(cand, st_.corr[j], atol=1e-12)
    assert np.allclose(st_.corr, stats.dcor_matrix(X, 60, seed=1), atol=1e-10)


# -- snapshot --------------------------------------------------------------------


def test_snapshot_audit_and_json():
    r = np.random.default_rng(0)
    X = r.normal(size=(100, 3))
    snap = stats.StatsSnapshot.from_matrix(X, 10)
    snap.apply_cell_change(5, X[5].copy(), 1, 0.25)
    X[5, 1] = 0.25
    report = snap.audit(X)
    assert report["histogram_max_abs"] == 0.0 and report["correlation_max_abs"] < 1e-12
    js = snap.to_json(["a", "b", "c"])
    assert js["mode"] == "pearson" and len(js["histograms"]) == 3
    assert len(js["histograms"][0]["edges"]) == 11 and sum(js["histograms"][0]["counts"]) == 100
