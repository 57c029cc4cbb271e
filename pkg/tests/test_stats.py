from __future__ import annotations

import itertools

import numpy as np
import pytest
import scipy.stats as ss
from hypothesis import given
from hypothesis import strategies as st

from cachesae import stats

small = st.lists(st.integers(-4, 4), min_size=1, max_size=7)


def brute_cliffs(x, y):
    return sum(np.sign(a - b) for a in x for b in y) / (len(x) * len(y))


def brute_mw_p(x, y):
    pooled = np.concatenate([x, y]).astype(float)
    ranks = ss.rankdata(pooled)
    n, N = len(x), len(pooled)
    mean = n * (N + 1) / 2
    obs = abs(ranks[:n].sum() - mean)
    hits = total = 0
    for idx in itertools.combinations(range(N), n):
        total += 1
        hits += abs(ranks[list(idx)].sum() - mean) >= obs - 1e-9
    return hits / total


def brute_wilcoxon_p(d):
    d = np.asarray(d, float)
    d = d[d != 0]
    r = ss.rankdata(np.abs(d))
    mean = r.sum() / 2
    obs = abs(r[d > 0].sum() - mean)
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        hits += abs(r[np.array(signs, bool)].sum() - mean) >= obs - 1e-9
    return hits / 2 ** len(d)


def test_wilson_fixture():
    ci = stats.wilson_ci(4483, 4851)
    assert abs(ci.low - 0.916) <= 0.001 and abs(ci.high - 0.931) <= 0.001


def test_wilson_edges():
    assert stats.wilson_ci(0, 10).low == 0.0
    assert stats.wilson_ci(10, 10).high == 1.0
    with pytest.raises(ValueError):
        stats.wilson_ci(3, 0)
    with pytest.raises(ValueError):
        stats.wilson_ci(11, 10)


@given(small, small)
def test_cliffs_delta_matches_enumeration(x, y):
    assert stats.cliffs_delta(x, y) == pytest.approx(brute_cliffs(x, y), abs=1e-12)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=6),
       st.lists(st.integers(0, 5), min_size=1, max_size=6))
def test_mann_whitney_exact_matches_enumeration(x, y):
    res = stats.mann_whitney(x, y)
    if res.degenerate:
        assert res.p == 1.0
        return
    assert res.exact
    assert res.p == pytest.approx(brute_mw_p(np.array(x), np.array(y)), abs=1e-12)


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=10))
def test_wilcoxon_exact_matches_enumeration(d):
    res = stats.wilcoxon_signed_rank(d)
    if all(v == 0 for v in d):
        assert res.p == 1.0 and res.degenerate
        return
    assert res.p == pytest.approx(brute_wilcoxon_p(d), abs=1e-12)


def test_mann_whitney_matches_scipy_without_ties(rng):
    x, y = rng.normal(size=8), rng.normal(size=9) + 0.5
    want = ss.mannwhitneyu(x, y, alternative="two-sided", method="exact").pvalue
    assert stats.mann_whitney(x, y).p == pytest.approx(want, rel=1e-10)


def test_wilcoxon_matches_scipy_without_ties(rng):
    d = rng.normal(size=11) + 0.3
    want = ss.wilcoxon(d, alternative="two-sided", method="exact").pvalue
    assert stats.wilcoxon_signed_rank(d).p == pytest.approx(want, rel=1e-10)


def test_large_sample_normal_approximation(rng):
    x, y = rng.normal(size=200), rng.normal(size=200) + 0.4
    res = stats.mann_whitney(x, y)
    want = ss.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic").pvalue
    assert not res.exact and res.p == pytest.approx(want, rel=1e-8)
    d = rng.normal(size=100) + 0.5
    w = stats.wilcoxon_signed_rank(d)
    want = ss.wilcoxon(d, alternative="two-sided", method="approx", correction=True).pvalue
    assert not w.exact and w.p == pytest.approx(want, rel=1e-8)


def test_holm_and_bonferroni():
    p = [0.01, 0.04, 0.03, 0.005]
    np.testing.assert_allclose(stats.holm(p), [0.03, 0.06, 0.06, 0.02])
    np.testing.assert_allclose(stats.bonferroni(p), [0.04, 0.16, 0.12, 0.02])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_holm_is_monotone_and_bounded(p):
    adj = stats.holm(p)
    assert np.all(adj >= np.asarray(p) - 1e-15) and np.all(adj <= 1.0)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= -1e-15)


def test_bootstrap_contains_estimate(rng):
    v = rng.normal(size=50)
    ci = stats.bootstrap_ci(v, np.mean, 500, 0)
    assert ci.contains(float(v.mean()))
    assert ci == stats.bootstrap_ci(v, np.mean, 500, 0)


def test_cluster_bootstrap_singletons_match_plain(rng):
    v = rng.normal(size=30)
    a = stats.cluster_bootstrap(v, np.arange(30), np.mean, 400, 5)
    b = stats.bootstrap_ci(v, np.mean, 400, 5)
    assert (a.low, a.high) == (b.low, b.high)


def test_cluster_bootstrap_single_cluster_degenerate():
    ci = stats.cluster_bootstrap([1.0, 2.0, 3.0], [7, 7, 7])
    assert ci.degenerate and ci.low == ci.high == 2.0


def test_cluster_bootstrap_wider_for_correlated_clusters(rng):
    centres = rng.normal(size=10)
    v = np.repeat(centres, 20) + 0.01 * rng.normal(size=200)
    cl = np.repeat(np.arange(10), 20)
    assert stats.cluster_bootstrap(v, cl, resamples=500).width > \
        2 * stats.bootstrap_ci(v, resamples=500).width


def test_correlations(rng):
    x = rng.normal(size=40)
    y = 2 * x + 0.1 * rng.normal(size=40)
    r = stats.pearson(x, y)
    assert r.r == pytest.approx(ss.pearsonr(x, y)[0], abs=1e-12)
    assert r.p == pytest.approx(ss.pearsonr(x, y)[1], rel=1e-6)
    assert stats.spearman(x, y).r == pytest.approx(ss.spearmanr(x, y)[0], abs=1e-12)
    assert stats.pearson([1, 1, 1], [1, 2, 3]).degenerate


def test_ks_two_sample(rng):
    res = stats.ks_2samp(rng.normal(size=100), rng.normal(size=100) + 1)
    assert res.p < 1e-6


def test_bimodality_coefficient(rng):
    uni = rng.normal(size=500)
    bi = np.concatenate([rng.normal(-3, 0.5, 250), rng.normal(3, 0.5, 250)])
    assert stats.bimodality_coefficient(uni) < 5 / 9 < stats.bimodality_coefficient(bi)


def test_median_mad():
    med, se = stats.median_mad([1.0, 2.0, 3.0, 10.0])
    assert med == 2.5
    assert se == pytest.approx(1.0 / 2.0)


def test_wilson_coverage_simulation():
    rng = np.random.default_rng(0)
    hits = rng.binomial(200, 0.9, size=10_000)
    cover = np.mean([stats.wilson_ci(int(h), 200).contains(0.9) for h in hits])
    assert 0.93 <= cover <= 0.97


def test_cliffs_delta_extremes():
    assert stats.cliffs_delta([1, 2, 3], [3, 2, 1]) == 0.0
    assert stats.cliffs_delta([5, 6], [1, 2, 3]) == 1.0
