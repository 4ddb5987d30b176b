import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lodada.data import Dataset
from lodada.divergence import DivergenceReport
from lodada.filter import (FilterConfig, admit_count, build_weighted_dataset, critic_weight,
                           filter_sources, normalize_d, tier_of)
from lodada.localize import REJECTED


def make_report(cluster, d, K, degenerate=()):
    cluster = np.asarray(cluster, dtype=np.int64)
    d = np.asarray(d, dtype=np.float64).copy()
    deg = np.zeros(K, dtype=bool)
    deg[list(degenerate)] = True
    kl = np.full(K, np.inf)
    for n in range(K):
        m = cluster == n
        if deg[n]:
            d[m] = np.nan
        elif m.any():
            kl[n] = d[m].mean()
        else:
            deg[n] = True
    n0 = np.bincount(cluster[cluster >= 0], minlength=K)
    return DivergenceReport(kl, n0, np.full(K, 20), np.full(K, 0.5), deg, cluster, d)


@st.composite
def reports(draw):
    K = draw(st.integers(1, 7))
    n = draw(st.integers(1, 60))
    cluster = draw(st.lists(st.integers(-1, K - 1), min_size=n, max_size=n))
    d = draw(st.lists(st.sampled_from([-1.0, -0.5, 0.0, 0.25, 1.0, 2.0]) | st.floats(-3, 3),
                      min_size=n, max_size=n))
    deg = draw(st.sets(st.integers(0, K - 1), max_size=K))
    return make_report(cluster, d, K, deg)


xis = st.tuples(*[st.sampled_from([0.0, 33.3, 50.0, 70.0, 80.0, 90.0, 100.0])] * 3).map(
    lambda t: tuple(sorted(t, reverse=True)))


def test_tier_examples():
    assert [tier_of(j, 30) for j in (10, 11, 20, 21)] == [1, 2, 2, 3]
    assert tier_of(1, 1) == 1
    assert [tier_of(j, 50) for j in (17, 18, 34, 35)] == [1, 2, 2, 3]
    for bad in (0, 31):
        with pytest.raises(ValueError):
            tier_of(bad, 30)


@given(st.integers(1, 200))
def test_tier_sizes(K):
    tiers = [tier_of(j, K) for j in range(1, K + 1)]
    assert tiers == sorted(tiers)
    assert tiers.count(1) == math.ceil(K / 3)
    assert tiers.count(1) + tiers.count(2) == math.ceil(2 * K / 3)


def test_admit_count_is_exact_ceiling():
    assert admit_count(90, 10) == 9
    assert admit_count(70, 10) == 7  # 0.7 * 10 in floats is 7.000000000000001
    assert admit_count(33.3, 1000) == 333
    assert admit_count(0.1, 1) == 1
    assert admit_count(0, 50) == 0 and admit_count(100, 50) == 50


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(70, 80, 90)
    with pytest.raises(ValueError):
        FilterConfig(alpha=-1)
    with pytest.raises(ValueError):
        FilterConfig(xi1=101)


def test_identity_and_annihilation():
    rep = make_report([0, 0, 1, REJECTED, 1], [0.1, 0.2, 0.3, 0.0, 0.4], 2)
    np.testing.assert_array_equal(filter_sources(rep, FilterConfig(100, 100, 100)).admitted,
                                  [0, 1, 2, 4])
    assert filter_sources(rep, FilterConfig(0, 0, 0)).admitted.size == 0


def test_tier_one_cluster_keeps_smallest_d():
    d = np.arange(10)[::-1].astype(float)  # record 9 has the smallest d
    rep = make_report(np.zeros(10), d, 1)
    adm = filter_sources(rep, FilterConfig())
    np.testing.assert_array_equal(adm.admitted, np.arange(1, 10))


def test_ties_broken_by_record_index():
    rep = make_report(np.zeros(4), [1.0, 0.0, 1.0, 1.0], 1)
    adm = filter_sources(rep, FilterConfig(50, 50, 50))
    np.testing.assert_array_equal(adm.per_cluster[0], [1, 0])


def test_degenerate_cluster_keeps_record_order_at_last_tier():
    rep = make_report([1, 1, 1, 1, 0, 0, 0], [0, 0, 0, 0, 3.0, 1.0, 2.0], 2, degenerate=[1])
    adm = filter_sources(rep, FilterConfig(100, 50, 50))
    assert adm.rank.tolist() == [1, 2] and adm.tier.tolist() == [1, 2]
    np.testing.assert_array_equal(adm.per_cluster[1], [0, 1])


@given(reports(), xis)
def test_admission_properties(rep, xi):
    cfg = FilterConfig(*xi)
    adm = filter_sources(rep, cfg)
    assert np.all(np.diff(adm.admitted) > 0)
    assert np.all(rep.cluster[adm.admitted] != REJECTED)
    expected = 0
    for n in range(rep.K):
        members = np.flatnonzero(rep.cluster == n)
        expected += admit_count(cfg.xi[adm.tier[n] - 1], members.size)
        if not rep.degenerate[n]:
            kept = np.isin(members, adm.per_cluster[n])
            if kept.any() and (~kept).any():
                assert rep.d[members[kept]].max() <= rep.d[members[~kept]].min()
    assert adm.admitted.size == expected


@given(reports(), xis, st.permutations(range(7)))
def test_admission_invariant_under_cluster_relabeling(rep, xi, perm):
    perm = np.array([p for p in perm if p < rep.K])
    if perm.size != rep.K:
        perm = np.arange(rep.K)
    relabeled = np.where(rep.cluster >= 0, perm[np.maximum(rep.cluster, 0)], REJECTED)
    deg = [int(perm[n]) for n in np.flatnonzero(rep.degenerate)]
    d = np.where(np.isnan(rep.d), 0.0, rep.d)
    rep2 = make_report(relabeled, d, rep.K, deg)
    if np.unique(rep.kl).size != rep.K:
        return  # ties (including several degenerate clusters) are broken by index
    a = filter_sources(rep, FilterConfig(*xi)).admitted
    b = filter_sources(rep2, FilterConfig(*xi)).admitted
    assert a.size == b.size


def test_normalize_d_examples():
    np.testing.assert_allclose(normalize_d([1.0, 2.0, 3.0]), [-1.0, -0.5, 0.0], atol=1e-12)
    np.testing.assert_array_equal(normalize_d([2.0, 2.0]), [0.0, 0.0])
    np.testing.assert_allclose(normalize_d([-2.0, 0.0]), [-1.0, 0.0], atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(0, 5))
def test_weights_range_and_order(d, alpha):
    d_hat = normalize_d(d)
    assert np.all((d_hat >= -1 - 1e-12) & (d_hat <= 0))
    w = critic_weight(d_hat, alpha)
    assert np.all((w >= 1 - 1e-12) & (w <= math.exp(alpha) * (1 + 1e-12)))
    order = np.argsort(d, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-12)


def test_critic_weight_examples():
    assert critic_weight(0.0, 1.0) == 1.0
    assert critic_weight(-1.0, 1.0) == pytest.approx(math.e, abs=1e-12)
    np.testing.assert_array_equal(critic_weight(np.array([-1.0, -0.3, 0.0]), 0.0), 1.0)


def test_build_weighted_dataset(tmp_path, rng):
    n = 12
    src = Dataset(rng.normal(size=(n, 2)), rng.normal(size=(n, 1)), rng.normal(size=n),
                  rng.normal(size=(n, 2)), ["source"] * n)
    tar = src.relabel("target")
    cluster = np.array([0] * 5 + [1] * 4 + [REJECTED] * 2 + [2])
    d = np.concatenate([np.linspace(0, 1, 5), np.linspace(2, 3, 4), [0, 0], [0]])
    rep = make_report(cluster, d, 3, degenerate=[2])
    wd = build_weighted_dataset(src, tar, rep, FilterConfig(), {"seed": 1})
    assert np.all(np.diff(wd.source_index) > 0)
    np.testing.assert_array_equal(wd.source.s, src.s[wd.source_index])
    finite = ~np.isnan(wd.d)
    assert wd.d_hat[finite].min() == -1.0 and wd.d_hat[finite].max() == 0.0
    assert np.all(wd.d_hat[~finite] == 0.0) and np.all(wd.weight[~finite] == 1.0)
    np.testing.assert_allclose(wd.weight, np.exp(-wd.d_hat))

    wd.save_jsonl(tmp_path / "w.jsonl")
    recs = [json.loads(l) for l in (tmp_path / "w.jsonl").read_text().splitlines()]
    assert len(recs) == wd.n_source
    assert {"cluster", "d", "d_hat", "weight", "s", "a", "r", "s_next", "domain"} <= set(recs[0])
    wd.save_summary(tmp_path / "s.json", n_raw_source=n)
    summary = json.loads((tmp_path / "s.json").read_text())
    assert sum(t["admitted"] for t in summary["tiers"].values()) == wd.n_source


def test_empty_admission(rng):
    n = 3
    src = Dataset(rng.normal(size=(n, 1)), rng.normal(size=(n, 1)), np.zeros(n),
                  rng.normal(size=(n, 1)), ["source"] * n)
    rep = make_report([0, 0, 0], [0.1, 0.2, 0.3], 1)
    wd = build_weighted_dataset(src, src.relabel("target"), rep, FilterConfig(0, 0, 0))
    assert wd.source is None and wd.n_source == 0
