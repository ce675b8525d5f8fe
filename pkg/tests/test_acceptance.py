"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the pytest summary) before
asserting, so a failing criterion still reports what it measured.
"""

import json
import math
import time

import numpy as np
import pandas as pd
import pytest

from telematics_ubi.cli import main
from telematics_ubi.evaluate import (
    METRICS,
    VoteLedger,
    chi_square_stat,
    kfold_partition,
    majority_vote_select,
    predicted_count_distribution,
    score_dss,
    score_qs,
    score_rps,
    score_sphs,
)
from telematics_ubi.features import accumulate_transitions, bin_config_for_width
from telematics_ubi.ingest import parse_raw_records, parse_trip_list, reorder_chronological, write_raw_records, write_trip_list
from telematics_ubi.learning import fit_loglog, second_derivative_coeffs
from telematics_ubi.pipeline import arrival_table, clean_portfolio, observations_from_clean, transition_probs
from telematics_ubi.regress import (
    NEGBIN,
    POISSON,
    CountDistribution,
    ModelSpec,
    count_pmf,
    fit_model,
    fit_negbin,
    nb_deviance,
    predict_mean,
    wald_test,
)
from telematics_ubi.simulate import (
    SimConfig,
    inject_defects,
    realized_probs,
    simulate_exposure_data,
    simulate_nb_claims,
    simulate_portfolio,
    simulate_selection_data,
)

SEEDS = range(20)


# 1 -------------------------------------------------------------------------------


def test_transition_matrix_integrity(acceptance):
    t0 = time.perf_counter()
    # events off: harsh records shorten gaps and rescale cells by design, which
    # would make record weights differ from the chain's minute transitions
    cfg = SimConfig(n_policies=100, seed=3, trips_per_day=7, trip_minutes_median=20, harsh_rates=(0, 0, 0, 0),
                    severe_rate=0, cancel_rate=0, late_start_rate=0)
    p = simulate_portfolio(cfg)
    clean = clean_portfolio(p.records, p.trips, p.policies)
    obs = observations_from_clean(clean)
    row_err = 0.0
    for h in (2, 10, 26, 27, 30):
        w, probs, visited = transition_probs(obs, bin_config_for_width(h))
        row_err = max(row_err, float(np.abs(probs.sum(axis=2)[visited] - 1).max()))
    _, probs, _ = transition_probs(obs, bin_config_for_width(10))
    idx = [p.truth.policy_ids.index(pid) for pid in clean.policies["policy_id"]]
    n_trans = p.truth.transition_counts[idx].sum(axis=(1, 2))
    truth = realized_probs(p.truth)[idx]
    enough = n_trans >= 1e4
    err = float(np.abs(probs[enough] - truth[enough]).max())
    elapsed = time.perf_counter() - t0
    ok = row_err <= 1e-9 and err <= 0.02 and enough.all() and elapsed < 30
    acceptance(1, ok, f"row-sum err {row_err:.1e}, max entry err {err:.1e} over {int(enough.sum())} policies "
                      f"(min {int(n_trans.min())} transitions), {elapsed:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------------


def test_harsh_event_rescaling(acceptance):
    # observation at 0 s, harsh event at 20 s, observation at 60 s
    w = accumulate_transitions([0, 20, 60], [15, 35, 55])
    ok = w[2, 4] == 3.0 and w[4, 6] == 1.5 and w.sum() == 4.5
    acceptance(2, ok, f"weights {w[2, 4]} and {w[4, 6]}")
    assert ok


# 3 -------------------------------------------------------------------------------


def test_negbin_machinery(acceptance):
    theta = 1.2
    hits, monotone = 0, True
    for seed in SEEDS:
        df = simulate_nb_claims(n=1500, seed=seed, theta=theta, beta=(-0.8, 0.5))
        X = np.column_stack([np.ones(len(df)), df["x"]])
        fit = fit_negbin(X, df["claim_count"].to_numpy())
        z = np.abs(fit.beta - [-0.8, 0.5]) / np.array(list(fit.std_errors.values()))
        hits += bool((z < 3).all() and 0.8 * theta <= fit.theta <= 1.5 * theta)
        h = np.array(fit.ll_history)
        # rounding-level slack only
        monotone &= bool(np.all(np.diff(h) >= -1e-12 * np.abs(h[1:])))
    d0 = abs(nb_deviance([1, 3], [1, 3]))
    d1 = abs(nb_deviance([0], [1.0]) - 2 * math.log(2))
    # the quoted 0.33979 is this expression truncated to five decimals
    dev = nb_deviance([2], [1.0])
    d2 = abs(dev - 2 * (2 * math.log(2) + 3 * math.log(2 / 3)))
    ok = (hits >= 18 and monotone and d0 == 0 and d1 <= 1e-6 and d2 <= 1e-6
          and abs(dev - 0.33979) < 1e-5)
    acceptance(3, ok, f"{hits}/20 seeds recover beta and theta, ll monotone {monotone}, "
                      f"deviance errors {d0:.0e}/{d1:.1e}/{d2:.1e}")
    assert ok


# 4 -------------------------------------------------------------------------------


def test_poisson_vs_negbin_chi_square(acceptance):
    wins, example = 0, None
    for seed in SEEDS:
        df = simulate_nb_claims(seed=seed, theta=1.0)
        m = int(df["claim_count"].max())
        stat = {}
        for fam in (POISSON, NEGBIN):
            d = predicted_count_distribution(fit_model(df, ModelSpec.from_strings(["x"], None, fam)), df, m)
            stat[fam] = chi_square_stat(d.observed, d.expected).statistic
        wins += stat[POISSON] > stat[NEGBIN]
        example = example or stat
    ok = wins >= 18
    acceptance(4, ok, f"Poisson chi2 larger in {wins}/20 seeds (seed 0: {example[POISSON]:.1f} vs "
                      f"{example[NEGBIN]:.2f})")
    assert ok


# 5 -------------------------------------------------------------------------------


def _moments(p):
    k = np.arange(len(p))
    mean = float(p @ k)
    return CountDistribution(p, mean, math.sqrt(float(p @ (k - mean) ** 2)))


def test_scoring_rules(acceptance):
    mass = np.zeros(8)
    mass[2] = 1.0
    P = CountDistribution(mass, 2.0, 0.0)
    identities = score_qs(P, 2) == -1 and score_sphs(P, 2) == -1 and score_rps(P, 2) == 0

    oracle = -2 * math.exp(-1) + sum((math.exp(-1) / math.factorial(k)) ** 2 for k in range(40))
    qs = score_qs(count_pmf(None, mu=1.0, k_max=40), 0)
    qs_err = abs(qs - oracle)

    q = count_pmf(None, mu=1.0, theta=1.0, k_max=50).probs
    q = q / q.sum()
    Q = _moments(q)
    rules = (score_qs, score_sphs, score_rps, score_dss)
    own = [sum(q[x] * r(Q, x) for x in range(len(q))) for r in rules]
    rng = np.random.default_rng(0)
    proper = True
    for _ in range(200):
        p = q * np.exp(rng.normal(scale=rng.uniform(0.01, 1.0), size=len(q)))
        Pp = _moments(p / p.sum())
        for r, s in zip(rules, own):
            proper &= s <= sum(q[x] * r(Pp, x) for x in range(len(q))) + 1e-10
    ok = identities and qs_err <= 1e-5 and proper
    acceptance(5, ok, f"point-mass identities {identities}, qs(Poisson(1), 0) = {qs:.6f} vs summation oracle "
                      f"{oracle:.6f}, propriety over 200 forecasts {proper}")
    assert ok


# 6 -------------------------------------------------------------------------------


def _vote(seed):
    df, true = simulate_selection_data(n=2000, seed=seed)
    pool = ModelSpec.from_strings([f"x{j}" for j in range(1, 9)], "covariate:total_time", NEGBIN)
    plan = kfold_partition(df["claim_count"], 5, seed=seed)
    ledger, report, final = majority_vote_select(df, pool, plan)
    return true, ledger, report, plan


def _exact_three_of_five():
    ledger = VoteLedger.tally(["a", "b"], [["a", "b"], ["a"], ["a", "b"], ["b"], []], threshold=3)
    return ledger.votes == {"a": 3, "b": 3} and ledger.final_terms == ["a", "b"]


def _reproducible(seed=0):
    runs = []
    for _ in range(2):
        _, ledger, report, plan = _vote(seed)
        runs.append(json.dumps({"plan": plan.to_dict(), "votes": ledger.to_dict(), "metrics": report.to_dict()},
                               sort_keys=True))
    return runs[0] == runs[1]


def test_majority_vote_recovery(acceptance):
    hits, extra = 0, []
    for seed in SEEDS:
        true, ledger, _, _ = _vote(seed)
        got = set(ledger.final_terms)
        hits += got == set(true)
        extra.append(len(got - set(true)))
    three, repro = _exact_three_of_five(), _reproducible()
    ok = hits >= 18 and three and repro
    acceptance(6, ok, f"exact recovery in {hits}/20 seeds (needs 18; spurious terms kept in "
                      f"{sum(e > 0 for e in extra)} seeds, true terms never missed: "
                      f"{hits + sum(e > 0 for e in extra) == 20}), 3/5 included {three}, reproducible {repro}")
    assert ok


def test_exact_three_votes_included():
    assert _exact_three_of_five()


def test_vote_reports_reproducible():
    assert _reproducible(seed=1)


# 7 -------------------------------------------------------------------------------


def test_learning_effect(acceptance):
    k = np.arange(1, 101, dtype=float)
    exact = abs(fit_loglog(k, k**2).beta - 0.5)
    fit = fit_loglog(k, k**2)
    identity = second_derivative_coeffs(fit).p == fit.beta - 2.0
    from telematics_ubi.learning import PowerLawFit

    p_quoted = second_derivative_coeffs(PowerLawFit(0.0, 0.4430, 0.0, 0.0, 0, 1.0)).p
    cross = abs(p_quoted - (-1.5571)) <= 1e-3 and abs(p_quoted - (-1.5570)) <= 1e-12

    hits, betas = 0, []
    for seed in SEEDS:
        # homogeneous drivers and a high severe rate: pooled OLS of ln k on ln t
        # is biased towards zero when drivers differ in their event rates
        cfg = SimConfig(n_policies=50, seed=seed, severe_rate=20, severe_learning_beta=0.5,
                        harsh_multiplier_shape=1e6, harsh_rates=(0.01,) * 4)
        p = simulate_portfolio(cfg)
        c = clean_portfolio(p.records, p.trips, p.policies)
        arr, _ = arrival_table(c.records, c.trips_frame(), c.policies)
        sev = fit_loglog(arr[arr["event_type"] == "severe"]).beta
        half_g = fit_loglog(arr[arr["event_type"] != "severe"]).beta
        betas.append((sev, half_g))
        hits += abs(sev - 0.5) <= 0.05 and sev < half_g
    sev = [b[0] for b in betas]
    ok = exact <= 1e-9 and identity and cross and hits >= 18
    acceptance(7, ok, f"t=k^2 beta err {exact:.1e}, p identity {identity}, 0.4430 -> p={p_quoted:.4f}; "
                      f"severe beta in 0.5+-0.05 and below 0.5G in {hits}/20 seeds "
                      f"(severe {min(sev):.3f}-{max(sev):.3f}, 0.5G {np.mean([b[1] for b in betas]):.3f})")
    assert ok


# 8 -------------------------------------------------------------------------------


def test_wald_cross_check(acceptance):
    z, p = wald_test(0.5495, null=1.0, se=0.1016)
    ok = 8e-6 <= p <= 1.1e-5
    acceptance(8, ok, f"z = {z:.3f}, p = {p:.2e} ({100 * p:.4f}%)")
    assert ok


# 9 -------------------------------------------------------------------------------


def test_exposure_semantics(acceptance):
    df = simulate_exposure_data(seed=0)
    off = fit_model(df, ModelSpec.from_strings(["x"], "offset:total_time", NEGBIN))
    cov = fit_model(df, ModelSpec.from_strings(["x"], "covariate:total_time", NEGBIN))
    c = cov.coefficients["log(total_time)"]
    rows = df.head(50)
    scaled = rows.assign(total_time=rows["total_time"] * 3.7)
    deg1 = float(np.abs(predict_mean(off, scaled) / predict_mean(off, rows) - 3.7).max())
    degc = float(np.abs(predict_mean(cov, scaled) / predict_mean(cov, rows) - 3.7**c).max())

    hits = 0
    for seed in SEEDS:
        d = simulate_exposure_data(seed=seed)
        e = {}
        for mode in ("offset", "covariate"):
            fit = fit_model(d, ModelSpec.from_strings(["x"], f"{mode}:total_time", NEGBIN))
            e[mode] = predicted_count_distribution(fit, d, 4).expected
        hits += e["offset"][0] > e["covariate"][0] and e["offset"][4] > e["covariate"][4]
    ok = deg1 <= 1e-12 and degc <= 1e-12 and hits >= 18
    acceptance(9, ok, f"homogeneity errors {deg1:.1e} (degree 1) and {degc:.1e} (degree {c:.3f}); offset model "
                      f"higher at 0 and 4+ in {hits}/20 seeds")
    assert ok


# 10 ------------------------------------------------------------------------------


def test_ingestion_throughput(acceptance, tmp_path):
    small = simulate_portfolio(SimConfig(n_policies=5, seed=11))
    shuffled, manifest = inject_defects(small.records, {"out_of_order": 1.0}, seed=1)
    restored = reorder_chronological(shuffled)
    round_trip = bool(manifest) and all(
        np.array_equal(getattr(restored, c), getattr(small.records, c))
        for c in ("device", "timestamp", "speed", "direction", "kind", "gps_valid"))

    p = simulate_portfolio(SimConfig(n_policies=190, seed=10,
                                     defect_rates={"out_of_order": 0.05, "invalid_gps": 0.05,
                                                   "missing_keyoff": 0.05}))
    raw, trips = tmp_path / "raw.csv", tmp_path / "trips.csv"
    write_raw_records(raw, p.records)
    write_trip_list(trips, p.trips)
    t0 = time.perf_counter()
    records = parse_raw_records(raw)
    entries = parse_trip_list(trips)
    clean = clean_portfolio(records, entries, p.policies)
    elapsed = time.perf_counter() - t0
    n = len(records)
    ok = round_trip and n >= 1_000_000 and elapsed < 60 and clean.diagnostics["trips_retained"] > 0
    acceptance(10, ok, f"defect round trip {round_trip}; {n:,} records parsed, reordered, matched and filtered "
                       f"in {elapsed:.1f}s")
    assert ok


# 11 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_robustness_sweep(acceptance, tmp_path):
    ini = tmp_path / "big.ini"
    ini.write_text("[simulate]\nn_policies = 1500\nseed = 0\n[output]\ndir = out\n")
    for stage in ("simulate", "ingest"):
        assert main(["--config", str(ini), "--threads", "1", stage]) == 0
    t0 = time.perf_counter()
    code = main(["--config", str(ini), "--threads", "1", "robustness"])
    elapsed = time.perf_counter() - t0
    table = pd.read_csv(tmp_path / "out" / "robustness.csv")
    metric_cols = [c for c in table.columns if c not in ("h", "m")]
    complete = all(any(c.endswith(f"_{m}") for c in metric_cols) for m in METRICS)
    finite = bool(np.isfinite(table[metric_cols].to_numpy(dtype=float)).all())
    ok = code == 0 and list(table["h"]) == list(range(2, 31)) and complete and finite and elapsed < 600
    acceptance(11, ok, f"{len(table)} rows x {len(metric_cols)} metric columns, all finite {finite}, "
                       f"{elapsed:.0f}s")
    assert ok
