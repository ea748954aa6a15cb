import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from oracles import f_sf_quadrature, f_sf_series, levene_direct, welch_anova_direct
from warmcap.stats import (
    BOOTSTRAP_RESAMPLES,
    CONFIDENCE_LEVEL,
    bootstrap_ci,
    compare_groups,
    f_sf,
    format_report,
    games_howell,
    levene,
    studentized_range_cdf,
    welch_anova,
)


def random_groups(rng, k=3, lo=4, hi=12):
    return [rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 2.0), rng.integers(lo, hi)) for _ in range(k)]


# -- F distribution -------------------------------------------------------------


@pytest.mark.parametrize("x", [0.05, 0.5, 1.0, 2.5, 7.0, 30.0])
@pytest.mark.parametrize("d1,d2", [(1, 5), (2, 10.5), (3, 27.3), (7, 3)])
def test_f_survival_two_routes(x, d1, d2):
    got = f_sf(x, d1, d2)
    assert abs(got - f_sf_quadrature(x, d1, d2)) < 1e-8
    assert abs(got - f_sf_series(x, d1, d2)) < 1e-8


def test_f_survival_edges():
    assert f_sf(0.0, 2, 3) == 1.0
    assert f_sf(math.inf, 2, 3) == 0.0


# -- studentized range ----------------------------------------------------------


@pytest.mark.parametrize("q,k,df", [(3.877, 3, 10), (2.0, 4, 7.5), (5.0, 5, 30), (1.0, 2, 3), (4.2, 3, 200)])
def test_studentized_range_matches_scipy(q, k, df):
    assert studentized_range_cdf(q, k, df) == pytest.approx(sps.studentized_range.cdf(q, k, df), abs=1e-6)


def test_studentized_range_table_value():
    # 5% critical value for k = 3, df = 10 is 3.877
    assert studentized_range_cdf(3.877, 3, 10) == pytest.approx(0.95, abs=2e-4)


def test_studentized_range_infinite_df():
    # k = 2, df = inf: range of two normals is |Z1 - Z2| = sqrt(2)|Z|
    q = 2.77
    assert studentized_range_cdf(q, 2, math.inf) == pytest.approx(math.erf(q / 2), abs=1e-12)


def test_studentized_range_domain():
    assert studentized_range_cdf(0.0, 3, 5) == 0.0
    with pytest.raises(ValueError):
        studentized_range_cdf(1.0, 1, 5)
    with pytest.raises(ValueError):
        studentized_range_cdf(1.0, 3, 0)


# -- identical groups -----------------------------------------------------------


def test_identical_groups_show_no_effect(rng):
    g = rng.normal(size=9)
    groups = [g.copy(), g[::-1].copy(), rng.permutation(g)]
    assert levene(groups).statistic == 0.0
    assert welch_anova(groups).statistic == 0.0
    for pair in games_howell(groups):
        assert not pair.significant
        assert abs(pair.p - 1.0) < 1e-6


# -- Welch ANOVA and Levene -------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_welch_anova_matches_direct_formula(seed):
    groups = random_groups(np.random.default_rng(seed), k=2 + seed % 4)
    res = welch_anova(groups)
    f, d1, d2 = welch_anova_direct([list(g) for g in groups])
    assert res.statistic == pytest.approx(f, rel=1e-9)
    assert res.df1 == d1
    assert res.df2 == pytest.approx(d2, rel=1e-9)
    assert res.p == pytest.approx(f_sf_quadrature(f, d1, d2), abs=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_levene_matches_direct_formula_and_scipy(seed):
    groups = random_groups(np.random.default_rng(100 + seed))
    res = levene(groups)
    w, d1, d2 = levene_direct([list(g) for g in groups])
    assert res.statistic == pytest.approx(w, rel=1e-9)
    assert (res.df1, res.df2) == (d1, d2)
    ref = sps.levene(*groups, center="mean")
    assert res.statistic == pytest.approx(ref.statistic, rel=1e-9)
    assert res.p == pytest.approx(ref.pvalue, abs=1e-9)


def test_levene_median_centre_matches_scipy(rng):
    groups = random_groups(rng)
    res = levene(groups, center="median")
    assert res.statistic == pytest.approx(sps.levene(*groups, center="median").statistic, rel=1e-9)
    with pytest.raises(ValueError):
        levene(groups, center="trimmed")


def test_welch_detects_a_shifted_group(rng):
    groups = [rng.normal(0, 1, 20), rng.normal(0, 1, 20), rng.normal(3, 1, 20)]
    assert welch_anova(groups).p < 1e-6


def test_zero_variance_group_with_distinct_means():
    res = welch_anova([[1.0, 1.0, 1.0], [2.0, 3.0, 4.0]])
    assert math.isinf(res.statistic) and res.p == 0.0


# -- Games-Howell -----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_two_group_games_howell_is_welch_t(seed):
    a, b = random_groups(np.random.default_rng(200 + seed), k=2)
    (pair,) = games_howell([a, b])
    ref = sps.ttest_ind(a, b, equal_var=False)
    assert abs(pair.p - ref.pvalue) < 1e-4
    assert pair.q == pytest.approx(abs(ref.statistic) * math.sqrt(2), rel=1e-9)


def test_games_howell_pair_order_and_labels(rng):
    out = games_howell(random_groups(rng, k=4), labels=list("abcd"))
    assert [(r.group_a, r.group_b) for r in out] == [
        ("a", "b"), ("a", "c"), ("a", "d"), ("b", "c"), ("b", "d"), ("c", "d")
    ]
    with pytest.raises(ValueError):
        games_howell(random_groups(rng, k=3), labels=["x"])


def test_games_howell_matches_textbook_formula(rng):
    groups = random_groups(rng, k=3, lo=8, hi=15)
    out = games_howell(groups)
    for r, (i, j) in zip(out, [(0, 1), (0, 2), (1, 2)]):
        a, b = groups[i], groups[j]
        se2a, se2b = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
        df = (se2a + se2b) ** 2 / (se2a**2 / (len(a) - 1) + se2b**2 / (len(b) - 1))
        q = abs(a.mean() - b.mean()) / math.sqrt((se2a + se2b) / 2)
        assert r.df == pytest.approx(df, rel=1e-9)
        assert r.p == pytest.approx(sps.studentized_range.sf(q, 3, df), abs=1e-6)


# -- input checks -------------------------------------------------------------------


def test_group_checks():
    with pytest.raises(ValueError, match="two groups"):
        welch_anova([[1.0, 2.0]])
    with pytest.raises(ValueError, match="at least 2"):
        levene([[1.0], [1.0, 2.0]])
    with pytest.raises(ValueError, match="non-finite"):
        games_howell([[1.0, np.nan], [1.0, 2.0]])


# -- bootstrap ------------------------------------------------------------------------


def test_bootstrap_defaults():
    assert BOOTSTRAP_RESAMPLES == 1000 and CONFIDENCE_LEVEL == 0.95
    ci = bootstrap_ci([0.1, 0.2, 0.3])
    assert (ci.resamples, ci.level) == (1000, 0.95)


def test_constant_scores_give_zero_width_interval():
    ci = bootstrap_ci([0.3] * 17)
    assert ci.lo == ci.hi == ci.mean == pytest.approx(0.3)
    assert ci.lo == ci.hi


def test_bootstrap_is_seed_deterministic(rng):
    x = rng.uniform(size=40)
    assert bootstrap_ci(x, seed=7) == bootstrap_ci(x.copy(), seed=7)
    assert bootstrap_ci(x, seed=7) != bootstrap_ci(x, seed=8)


def test_bootstrap_matches_direct_resampling(rng):
    x = rng.uniform(size=25)
    means = [x[np.random.default_rng([3, i]).integers(0, 25, 25)].mean() for i in range(200)]
    ci = bootstrap_ci(x, resamples=200, seed=3)
    assert [ci.lo, ci.hi] == pytest.approx(np.percentile(means, [2.5, 97.5]), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.integers(0, 10))
def test_wider_level_gives_wider_interval(x, seed):
    narrow = bootstrap_ci(x, resamples=200, level=0.8, seed=seed)
    wide = bootstrap_ci(x, resamples=200, level=0.99, seed=seed)
    assert wide.lo <= narrow.lo <= narrow.hi <= wide.hi
    assert min(x) - 1e-12 <= wide.lo and wide.hi <= max(x) + 1e-12


def test_bootstrap_checks():
    with pytest.raises(ValueError):
        bootstrap_ci([])
    with pytest.raises(ValueError):
        bootstrap_ci([1.0], level=1.0)


# -- report -----------------------------------------------------------------------------


def test_compare_groups_report(rng):
    report = compare_groups(random_groups(rng), labels=["a", "b", "c"])
    assert [g["label"] for g in report["groups"]] == ["a", "b", "c"]
    assert report["levene"]["center"] == "mean"
    assert len(report["games_howell"]) == 3
    text = format_report(report)
    assert "Welch ANOVA" in text and "a vs c" in text
