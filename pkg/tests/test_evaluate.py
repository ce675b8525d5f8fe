import json
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from telematics_ubi.errors import DegenerateSample, DegenerateSd, EmptyInput
from telematics_ubi.evaluate import (
    METRICS,
    VoteLedger,
    batch_scores,
    chi_square_stat,
    cross_validate,
    evaluate_predictions,
    expected_level_counts,
    format_relative_error,
    kfold_partition,
    mae,
    majority_vote_select,
    observed_level_counts,
    predicted_count_distribution,
    rmse,
    score_dss,
    score_qs,
    score_rps,
    score_sphs,
    train_test_split,
    welch_t_test,
)
from telematics_ubi.regress import NEGBIN, POISSON, CountDistribution, ModelSpec, count_pmf, fit_model, nb_deviance
from telematics_ubi.simulate import simulate_exposure_data, simulate_nb_claims


def _dist(probs):
    p = np.asarray(probs, dtype=float)
    k = np.arange(len(p))
    mean = float(p @ k)
    return CountDistribution(p, mean, math.sqrt(float(p @ (k - mean) ** 2)))


# --- point metrics ------------------------------------------------------------


def test_rmse_mae_hand_values():
    assert rmse([0, 2], [1, 1]) == 1.0
    assert mae([0, 2], [1, 1]) == 1.0
    assert rmse([3, 4], [3, 4]) == 0.0 and mae([3, 4], [3, 4]) == 0.0


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50))
def test_rmse_dominates_mae(pairs):
    y, yhat = zip(*pairs)
    assert rmse(y, yhat) >= mae(y, yhat) - 1e-9


def test_empty_inputs():
    with pytest.raises(EmptyInput):
        rmse([], [])
    with pytest.raises(EmptyInput):
        mae([], [])


# --- scoring rules ------------------------------------------------------------


def test_point_mass_scores():
    p = np.zeros(10)
    p[3] = 1.0
    P = CountDistribution(p, 3.0, 0.0)
    assert score_qs(P, 3) == -1.0
    assert score_sphs(P, 3) == -1.0
    assert score_rps(P, 3) == 0.0
    with pytest.raises(DegenerateSd):
        score_dss(P, 3)


def test_quadratic_score_poisson_unit_mean():
    P = count_pmf(None, mu=1.0, k_max=60)
    # sum_k p_k^2 for Poisson(1) equals e^-2 I_0(2)
    norm2 = math.exp(-2) * special.iv(0, 2)
    assert norm2 == pytest.approx(0.30851, abs=1e-5)
    direct = sum((math.exp(-1) / math.factorial(k)) ** 2 for k in range(60))
    assert direct == pytest.approx(norm2, rel=1e-12)
    assert score_qs(P, 0) == pytest.approx(-2 * math.exp(-1) + norm2, abs=1e-12)
    # the quoted four-decimal figure is a rounding of the exact -0.427251
    assert score_qs(P, 0) == pytest.approx(-0.42724, abs=5e-5)


def test_dawid_sebastiani_hand_value():
    P = CountDistribution(np.array([1.0]), 1.0, 2.0)
    assert score_dss(P, 3) == pytest.approx(1 + 2 * math.log(2), abs=1e-12)
    assert score_dss(P, 3) == pytest.approx(2.38629, abs=1e-5)


def test_rps_against_loop_oracle():
    P = count_pmf(None, mu=1.7, theta=0.9, k_max=200)
    for x in (0, 1, 4, 9):
        cdf, total = 0.0, 0.0
        for k, pk in enumerate(P.probs):
            cdf += pk
            total += (cdf - (1.0 if x <= k else 0.0)) ** 2
        assert score_rps(P, x) == pytest.approx(total, rel=1e-10)


def test_rps_invariant_once_tails_vanish():
    a = count_pmf(None, mu=1.0, theta=1.0, k_max=80)
    b = count_pmf(None, mu=1.0, theta=1.0, k_max=160)
    for x in range(6):
        assert score_rps(a, x) == pytest.approx(score_rps(b, x), abs=1e-12)


def test_scores_are_proper_against_perturbed_forecasts():
    q = count_pmf(None, mu=1.0, theta=1.0, k_max=50).probs
    q = q / q.sum()
    Q = _dist(q)
    rules = (score_qs, score_sphs, score_rps, score_dss)

    def expected(P, rule):
        return sum(q[x] * rule(P, x) for x in range(len(q)))

    own = [expected(Q, r) for r in rules]
    rng = np.random.default_rng(42)
    for _ in range(200):
        p = q * np.exp(rng.normal(scale=rng.uniform(0.01, 1.0), size=len(q)))
        P = _dist(p / p.sum())
        for r, s in zip(rules, own):
            assert s <= expected(P, r) + 1e-10


def test_batch_scores_match_single_forecast_scores():
    rng = np.random.default_rng(0)
    mu = rng.uniform(0.1, 3, size=20)
    y = rng.poisson(mu)
    for theta in (None, 1.3):
        b = batch_scores(y, mu, theta, k_max=120)
        for i in range(len(y)):
            P = count_pmf(None, mu=mu[i], theta=theta, k_max=120)
            assert b["qs"][i] == pytest.approx(score_qs(P, y[i]), abs=1e-12)
            assert b["sphs"][i] == pytest.approx(score_sphs(P, y[i]), abs=1e-12)
            assert b["rps"][i] == pytest.approx(score_rps(P, y[i]), abs=1e-10)
            assert b["dss"][i] == pytest.approx(score_dss(P, y[i]), abs=1e-12)


# --- chi-square -----------------------------------------------------------------


def test_chi_square_hand_value_and_zero():
    assert chi_square_stat([3, 1], [2, 2]).statistic == pytest.approx(1.0)
    assert chi_square_stat([5, 2, 1], [5, 2, 1]).statistic == 0.0


@given(st.lists(st.floats(0.6, 100), min_size=2, max_size=8), st.integers(0, 7), st.floats(0.1, 5))
def test_chi_square_zero_iff_equal(expected, i, delta):
    e = np.array(expected)
    assert chi_square_stat(e, e).statistic == 0.0
    o = e.copy()
    o[i % len(o)] += delta
    assert chi_square_stat(o, e).statistic > 0


def test_sparse_levels_merge_upward():
    res = chi_square_stat([10, 5, 0, 1], [9.0, 6.0, 0.2, 0.8])
    assert res.groups == [[0], [1], [2, 3]]
    assert res.merged == 1
    assert res.statistic == pytest.approx(1 / 9 + 1 / 6 + 0.0)


def test_last_sparse_level_merges_down():
    res = chi_square_stat([10, 5, 1], [9.0, 6.6, 0.4])
    assert res.groups == [[0], [1, 2]]
    assert res.statistic == pytest.approx(1 / 9 + 1 / 7)


def test_explicit_bins():
    res = chi_square_stat([10, 4, 2, 1, 1], [9, 5, 2, 1, 1], bins=[[0], [1], [2, 3, 4]])
    np.testing.assert_array_equal(res.observed, [10, 4, 4])
    assert res.statistic == pytest.approx(1 / 9 + 1 / 5)


def test_level_counts():
    np.testing.assert_array_equal(observed_level_counts([0, 0, 1, 3, 7], 3), [2, 1, 0, 2])
    e = expected_level_counts([1.0, 2.0], None, 4)
    assert e.sum() == pytest.approx(2.0)
    assert e[0] == pytest.approx(math.exp(-1) + math.exp(-2))
    tail = 2 - sum(stats.poisson.pmf(g, 1) + stats.poisson.pmf(g, 2) for g in range(4))
    assert e[4] == pytest.approx(tail)


def test_negbin_fits_overdispersed_counts_better_than_poisson():
    wins = 0
    for seed in range(20):
        df = simulate_nb_claims(seed=seed, theta=1.0)
        m = int(df["claim_count"].max())
        stat = {}
        for fam in (POISSON, NEGBIN):
            d = predicted_count_distribution(fit_model(df, ModelSpec.from_strings(["x"], None, fam)), df, m)
            stat[fam] = chi_square_stat(d.observed, d.expected).statistic
        wins += stat[POISSON] > stat[NEGBIN]
    assert wins >= 18


# --- prediction distributions ----------------------------------------------------


def test_prediction_distribution_single_row():
    df = pd.DataFrame({"x": [0.0], "claim_count": [0]})
    model = fit_model(pd.DataFrame({"x": [0.0, 1.0, 0.0, 1.0], "claim_count": [1, 1, 1, 1]}),
                      ModelSpec.from_strings(["x"], None, POISSON))
    d = predicted_count_distribution(model, df, 3)
    assert d.expected[0] == pytest.approx(math.exp(-1), abs=1e-8)
    assert d.expected.sum() == pytest.approx(1.0)


def test_relative_error_format():
    assert format_relative_error(0.0304) == "(+3.04%)"
    assert format_relative_error(-0.005) == "(-0.50%)"


def test_offset_model_overestimates_extreme_levels():
    hits = 0
    for seed in range(20):
        df = simulate_exposure_data(seed=seed)
        e = {}
        for mode in ("offset", "covariate"):
            fit = fit_model(df, ModelSpec.from_strings(["x"], f"{mode}:total_time", NEGBIN))
            e[mode] = predicted_count_distribution(fit, df, 4).expected
        hits += e["offset"][0] > e["covariate"][0] and e["offset"][4] > e["covariate"][4]
    assert hits >= 18


# --- Welch test -------------------------------------------------------------------


def _welch_oracle(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return t, 2 * stats.t.sf(abs(t), df)


def test_welch_matches_formula():
    t, p = welch_t_test([0, 1], [10, 11])
    tt, pp = _welch_oracle([0, 1], [10, 11])
    assert t == pytest.approx(tt) and p == pytest.approx(pp)
    assert t == pytest.approx(-10 / math.sqrt(0.5))
    rng = np.random.default_rng(3)
    a, b = rng.normal(0, 1, 40), rng.normal(0.3, 2, 25)
    assert welch_t_test(a, b) == pytest.approx(_welch_oracle(a, b))


def test_welch_identical_and_swapped():
    assert welch_t_test([1, 2, 3], [1, 2, 3]) == pytest.approx((0.0, 1.0))
    t1, p1 = welch_t_test([1, 2, 5], [3, 4, 9, 1])
    t2, p2 = welch_t_test([3, 4, 9, 1], [1, 2, 5])
    assert t1 == pytest.approx(-t2) and p1 == pytest.approx(p2)


def test_welch_degenerate():
    with pytest.raises(DegenerateSample):
        welch_t_test([1], [1, 2])
    with pytest.raises(DegenerateSample):
        welch_t_test([1, 1], [2, 2])


# --- folds --------------------------------------------------------------------------


def test_equal_counts_always_balanced():
    plan = kfold_partition(np.ones(23), 5, seed=1)
    assert plan.balanced and plan.spread == 0.0 and plan.attempts == 1


def test_leave_one_out_binary_is_unbalanced():
    plan = kfold_partition([0, 1, 0, 1, 1, 0], 6, seed=0)
    assert not plan.balanced
    assert plan.spread == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=10, max_size=200), st.integers(2, 6), st.integers(0, 1000))
def test_folds_partition_and_are_deterministic(y, k, seed):
    if k > len(y):
        return
    a = kfold_partition(y, k, seed)
    b = kfold_partition(y, k, seed)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert sorted(set(a.assignments.tolist())) == list(range(k))
    seen = np.concatenate([te for _, _, te in a.folds()])
    assert sorted(seen.tolist()) == list(range(len(y)))
    sizes = np.bincount(a.assignments)
    assert sizes.max() - sizes.min() <= 1
    yy = np.asarray(y, float)
    np.testing.assert_allclose(a.fold_means, [yy[a.assignments == f].mean() for f in range(k)])


def test_synthetic_portfolio_folds_within_tolerance():
    y = simulate_nb_claims(n=1500, seed=0, theta=1.2)["claim_count"]
    plan = kfold_partition(y, 5, seed=0)
    assert plan.balanced and plan.spread <= 0.05


def test_hold_out_split():
    y = simulate_nb_claims(n=1000, seed=1)["claim_count"]
    tr, te = train_test_split(y, 0.2, seed=0)
    assert len(te) == 200 and len(tr) == 800
    assert set(tr).isdisjoint(te)


# --- votes and cross-validation -----------------------------------------------------


def test_vote_threshold():
    sel = [["a", "b", "c"], ["a", "b"], ["a", "b", "c"], ["a"], ["a", "c"]]
    ledger = VoteLedger.tally(["a", "b", "c", "d"], sel, threshold=3)
    assert ledger.votes == {"a": 5, "b": 3, "c": 3, "d": 0}
    assert ledger.final_terms == ["a", "b", "c"]
    two = VoteLedger.tally(["b"], [["b"], ["b"], [], [], []])
    assert two.final_terms == []


def _selection_frame(seed=0, n=1500):
    rng = np.random.default_rng(seed)
    df = pd.DataFrame({c: rng.normal(size=n) for c in "abc"})
    df["claim_count"] = rng.negative_binomial(2, 2 / (2 + np.exp(-0.6 + 0.5 * df["a"])))
    return df


def test_majority_vote_uses_final_terms_on_every_fold():
    df = _selection_frame()
    pool = ModelSpec.from_strings(["a", "b", "c"], None, NEGBIN)
    plan = kfold_partition(df["claim_count"], 5, seed=0)
    fixed = {0: ["a", "b"], 1: ["a", "b"], 2: ["a", "b"], 3: ["a"], 4: ["c"]}
    calls = iter(range(5))

    def selector(train, spec, levels):
        return fixed[next(calls)]

    ledger, report, final = majority_vote_select(df, pool, plan, 3, selector=selector)
    assert ledger.votes == {"a": 4, "b": 3, "c": 1}
    assert [t.name for t in final.terms] == ["a", "b"]
    ref = cross_validate(df, final, plan)
    for m in METRICS:
        assert getattr(report, m) == pytest.approx(getattr(ref, m), abs=1e-12)


def test_majority_vote_is_deterministic():
    df = _selection_frame(1, 800)
    pool = ModelSpec.from_strings(["a", "b", "c"], None, NEGBIN)
    plan = kfold_partition(df["claim_count"], 5, seed=3)
    runs = [majority_vote_select(df, pool, plan) for _ in range(2)]
    assert json.dumps(runs[0][0].to_dict()) == json.dumps(runs[1][0].to_dict())
    assert runs[0][1].to_dict() == runs[1][1].to_dict()
    assert "a" in runs[0][0].final_terms


def test_fold_average_is_mean_of_folds():
    df = _selection_frame(2, 600)
    plan = kfold_partition(df["claim_count"], 5, seed=0)
    rep = cross_validate(df, ModelSpec.from_strings(["a"], None, NEGBIN), plan)
    for m in METRICS:
        assert rep.averages[m] == pytest.approx(np.mean([f[m] for f in rep.per_fold]), abs=1e-12)


def test_deviance_metric_is_per_observation():
    y = np.array([0, 2, 1, 0])
    mu = np.array([0.5, 1.2, 0.9, 0.3])
    out = evaluate_predictions(y, mu, 1.0)
    assert out["deviance"] == pytest.approx(nb_deviance(y, mu) / 4)
    assert out["rmse"] == pytest.approx(rmse(y, mu))
    assert set(out) == set(METRICS)
