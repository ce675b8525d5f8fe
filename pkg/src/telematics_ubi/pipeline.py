"""Stage glue between raw inputs and the modelling layer: portfolio cleaning,
the policy feature table, transition matrices for any bin width, and harsh
event arrival tables."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import date

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, PolicyRejected
from .evaluate import FoldPlan, cross_validate, majority_vote_select
from .features import (
    ROADTYPE_NAMES,
    SLOT_NAMES,
    BinConfig,
    PCAModel,
    aggregate_arrays,
    bin_config_for_width,
    normalize_rows,
    pca_fit,
    pca_project,
    policy_transition_weights,
)
from .ingest import (
    HARSH_KINDS,
    HARSH_NAMES,
    FILTER_CRITERIA,
    RecordTable,
    Trip,
    TripListEntry,
    assign_trips_to_policy,
    device_slices,
    filter_trips,
    format_timestamp,
    match_trips,
    parse_timestamp,
    reorder_chronological,
)
from .learning import age_group, build_event_sequences
from .regress import NEGBIN, ModelSpec

log = logging.getLogger(__name__)

REQUIRED_POLICY_COLUMNS = ("policy_id", "device_id", "coverage_start", "coverage_end", "claim_count")
TRADITIONAL_COLUMNS = ("policy_period", "car_value", "max_weight", "vehicle_age", "num_seats", "renewal", "use",
                       "region2", "region1", "age", "cancelled")


@dataclass
class CleanedPortfolio:
    records: RecordTable  # device-grouped, chronological
    slices: dict[str, slice]
    policies: pd.DataFrame  # retained policies
    policy_trips: dict[str, list[Trip]]
    diagnostics: dict = field(default_factory=dict)

    def trips_frame(self) -> pd.DataFrame:
        rows = []
        for pid, trips in self.policy_trips.items():
            for t in trips:
                e = t.trip_list
                rows.append({
                    "policy_id": pid,
                    "device_id": e.device_id,
                    "start_ts": format_timestamp(e.start_ts),
                    "end_ts": format_timestamp(e.end_ts),
                    "duration_s": e.duration_s,
                    "distance_km": e.distance_km,
                    "avg_speed": e.avg_speed,
                    "max_speed": e.max_speed,
                    **dict(zip(ROADTYPE_NAMES, e.roadtype_props)),
                    **{f"num_{n}": c for n, c in zip(HARSH_NAMES, t.harsh_counts.as_tuple())},
                    "observed_max_speed": t.observed_max_speed,
                    "span_start": t.span_start,
                    "span_end": t.span_end,
                    "match_error_start": t.match_error_start,
                    "match_error_end": t.match_error_end,
                })
        return pd.DataFrame(rows)


def _as_date(x) -> date:
    return x if isinstance(x, date) else date.fromisoformat(str(x)[:10])


def clean_portfolio(records: RecordTable, entries: list[TripListEntry], policies: pd.DataFrame) -> CleanedPortfolio:
    """Reorder, match, filter and assign trips for every policy.

    Policies with missing required fields, no trips in coverage or a
    telematics span deviating more than 92 days from coverage are dropped;
    every exclusion is counted in ``diagnostics``.
    """
    missing_cols = [c for c in REQUIRED_POLICY_COLUMNS if c not in policies.columns]
    if missing_cols:
        raise DataError(f"policy table lacks columns {missing_cols}", stage="ingest")
    records = reorder_chronological(records)
    slices = device_slices(records)
    by_device: dict[str, list[TripListEntry]] = {}
    for e in entries:
        by_device.setdefault(e.device_id, []).append(e)

    tally: Counter = Counter()
    policy_reasons: Counter = Counter()
    device_trips: dict[str, list[Trip]] = {}
    n_matched = 0
    for dev, ents in by_device.items():
        sl = slices.get(dev)
        if sl is None:
            tally["no_records_for_device"] += len(ents)
            continue
        ents.sort(key=lambda e: e.start_ts)
        matched = match_trips(ents, records.take(np.arange(sl.start, sl.stop)))
        n_matched += len(matched)
        device_trips[dev] = filter_trips(matched, tally)

    pol = policies.copy()
    pol["policy_id"] = pol["policy_id"].astype(str)
    pol["device_id"] = pol["device_id"].astype(str)
    incomplete = pol[list(REQUIRED_POLICY_COLUMNS)].isna().any(axis=1)
    policy_reasons["missing_required_fields"] = int(incomplete.sum())
    kept_rows, policy_trips = [], {}
    outside = dropped_with_policy = 0
    for idx, row in pol[~incomplete].iterrows():
        trips = device_trips.get(row["device_id"], [])
        try:
            if not trips:
                raise PolicyRejected("no retained trips", reason="no_trips_in_coverage", policy_id=row["policy_id"])
            pt = assign_trips_to_policy(trips, _as_date(row["coverage_start"]), _as_date(row["coverage_end"]),
                                        bool(row.get("cancelled", False)), policy_id=row["policy_id"])
        except PolicyRejected as exc:
            policy_reasons[exc.reason] += 1
            dropped_with_policy += len(trips)
            continue
        outside += pt.excluded_trips
        kept_rows.append(idx)
        policy_trips[row["policy_id"]] = pt.trips
    diagnostics = {
        "trips_listed": len(entries),
        "trips_matched": n_matched,
        "trips_rejected": int(tally.get("rejected", 0)),
        "trip_rejections": {c: int(tally.get(c, 0)) for c in FILTER_CRITERIA},
        "trips_without_device_records": int(tally.get("no_records_for_device", 0)),
        "trips_outside_coverage": outside,
        "trips_of_rejected_policies": dropped_with_policy,
        "trips_retained": sum(len(v) for v in policy_trips.values()),
        "policies_listed": len(pol),
        "policies_retained": len(kept_rows),
        "policy_rejections": dict(sorted(policy_reasons.items())),
    }
    return CleanedPortfolio(records, slices, pol.loc[kept_rows].reset_index(drop=True), policy_trips, diagnostics)


# ---------------------------------------------------------------------------
# observation arrays shared by every bin width


@dataclass
class Observations:
    """Valid GPS observations of retained trips, grouped by trip."""

    policy_index: np.ndarray
    trip_index: np.ndarray
    times: np.ndarray
    speeds: np.ndarray
    n_policies: int


def _ranges(starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
    return np.arange(total, dtype=np.int64) + offsets


def observation_arrays(records: RecordTable, slices: dict[str, slice], policy_ids: list[str],
                       trips_by_policy: dict[str, list], device_of: dict[str, str]) -> Observations:
    """Gather (policy, trip, time, speed) of valid records inside each trip span.

    ``trips_by_policy`` holds ``(span_start, span_end)`` pairs relative to the
    device slice.
    """
    starts, lengths, pidx = [], [], []
    for p, pid in enumerate(policy_ids):
        base = slices[device_of[pid]].start
        for s, e in trips_by_policy[pid]:
            starts.append(base + s)
            lengths.append(e - s + 1)
            pidx.append(p)
    starts = np.asarray(starts, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    rows = _ranges(starts, lengths)
    trip = np.repeat(np.arange(len(starts)), lengths)
    pol = np.repeat(np.asarray(pidx, dtype=np.int64), lengths)
    valid = records.gps_valid[rows]
    return Observations(pol[valid], trip[valid], records.timestamp[rows][valid].astype(float),
                        records.speed[rows][valid], len(policy_ids))


def observations_from_clean(clean: CleanedPortfolio) -> Observations:
    ids = clean.policies["policy_id"].tolist()
    spans = {pid: [(t.span_start, t.span_end) for t in clean.policy_trips[pid]] for pid in ids}
    dev = dict(zip(clean.policies["policy_id"], clean.policies["device_id"]))
    return observation_arrays(clean.records, clean.slices, ids, spans, dev)


def transition_probs(obs: Observations, cfg: BinConfig, diagnostics: Counter | None = None):
    w = policy_transition_weights(obs.policy_index, obs.trip_index, obs.times, obs.speeds, obs.n_policies, cfg,
                                  diagnostics)
    probs, visited = normalize_rows(w)
    return w, probs, visited


def pc_scores(probs: np.ndarray, k: int) -> tuple[np.ndarray, PCAModel]:
    model = pca_fit(probs.reshape(len(probs), -1))
    k = min(k, model.n_components)
    return pca_project(probs.reshape(len(probs), -1), model, k).reshape(len(probs), k), model


# ---------------------------------------------------------------------------
# feature table


def summary_frame(trips_df: pd.DataFrame) -> pd.DataFrame:
    """Policy aggregates from a retained-trip table (one row per trip)."""
    rows = []
    for pid, g in trips_df.groupby("policy_id", sort=False):
        s = aggregate_arrays(
            g["start_ts"].map(parse_timestamp).to_numpy(),
            g["end_ts"].map(parse_timestamp).to_numpy(),
            g["duration_s"].to_numpy(),
            g["distance_km"].to_numpy(),
            g["avg_speed"].to_numpy(),
            g["max_speed"].to_numpy(),
            g[[f"num_{n}" for n in HARSH_NAMES]].to_numpy(),
            g[list(ROADTYPE_NAMES)].to_numpy(),
            policy_id=pid,
        )
        rows.append(s.as_row())
    return pd.DataFrame(rows)


def feature_table(trips_df: pd.DataFrame, policies: pd.DataFrame, pcs: np.ndarray | None = None) -> pd.DataFrame:
    """Telematics aggregates, PC scores and policy covariates, one row per policy."""
    summ = summary_frame(trips_df)
    if pcs is not None:
        for j in range(pcs.shape[1]):
            summ[f"pc{j + 1}"] = pcs[:, j]
    pol = policies.copy()
    pol["policy_id"] = pol["policy_id"].astype(str)
    keep = ["policy_id", "claim_count"] + [c for c in TRADITIONAL_COLUMNS if c in pol.columns]
    out = summ.merge(pol[keep], on="policy_id", how="left", validate="one_to_one")
    return out


def policy_order(trips_df: pd.DataFrame) -> list[str]:
    return list(dict.fromkeys(trips_df["policy_id"].astype(str)))


def observations_from_trips(records: RecordTable, trips_df: pd.DataFrame) -> Observations:
    ids = policy_order(trips_df)
    slices = device_slices(records)
    spans = {pid: list(zip(g["span_start"].astype(int), g["span_end"].astype(int)))
             for pid, g in trips_df.groupby(trips_df["policy_id"].astype(str), sort=False)}
    dev = dict(zip(trips_df["policy_id"].astype(str), trips_df["device_id"].astype(str)))
    missing = {dev[p] for p in ids} - slices.keys()
    if missing:
        raise DataError(f"raw records lack devices {sorted(missing)[:5]}", stage="features")
    return observation_arrays(records, slices, ids, spans, dev)


# ---------------------------------------------------------------------------
# learning-effect arrivals


def arrival_table(records: RecordTable, trips_df: pd.DataFrame, policies: pd.DataFrame, *,
                  measure: str = "time") -> tuple[pd.DataFrame, Counter]:
    """Harsh-event arrivals of all retained policies with claim and age groups."""
    diag: Counter = Counter()
    records = reorder_chronological(records)
    slices = device_slices(records)
    pol = policies.set_index(policies["policy_id"].astype(str))
    frames = []
    harsh = np.isin(records.kind, [int(k) for k in HARSH_KINDS])
    for pid, g in trips_df.groupby(trips_df["policy_id"].astype(str), sort=False):
        dev = str(g["device_id"].iloc[0])
        sl = slices.get(dev)
        if sl is None:
            continue
        starts = g["start_ts"].map(parse_timestamp).to_numpy()
        ends = g["end_ts"].map(parse_timestamp).to_numpy()
        # events are taken from matched spans, so they are bounded by trips
        rows = _ranges(g["span_start"].to_numpy(dtype=np.int64) + sl.start,
                       (g["span_end"] - g["span_start"] + 1).to_numpy(dtype=np.int64))
        rows = rows[harsh[rows]]
        claims = pol.loc[pid, "claim_count"] if pid in pol.index else np.nan
        age = pol.loc[pid, "age"] if "age" in pol.columns and pid in pol.index else None
        frames.append(build_event_sequences(
            pid, starts, ends, records.timestamp[rows], records.kind[rows],
            trip_distances=g["distance_km"].to_numpy() if measure == "distance" else None,
            claim_group=None if pd.isna(claims) else ("claimed" if claims > 0 else "no_claim"),
            age_group=age_group(age), diagnostics=diag,
        ))
    if not frames:
        return pd.DataFrame(columns=["policy_id", "event_type", "rank_k", "cum_time_t", "claim_group",
                                     "age_group"]), diag
    return pd.concat(frames, ignore_index=True), diag


# ---------------------------------------------------------------------------
# model catalogue and the bin-width sweep

TRADITIONAL_POOL = ("region2[]", "max_weight", "car_value", "num_seats", "renewal", "use[others]", "vehicle_age")
TELEMATICS_POOL = ("prop_roadtype", "avg_speed", "max_speed", "num_acc", "num_brake", "num_left", "num_right",
                   "num_severe")
MATRIX_TERMS = ("pc1", "pc2")

# name -> (candidate terms, exposure); exposure is fixed and never voted on
MODEL_POOLS: dict[str, tuple[tuple[str, ...], str]] = {
    "mod3s": (TRADITIONAL_POOL, "offset:policy_period"),
    "t_mod3s": (TRADITIONAL_POOL + TELEMATICS_POOL, "covariate:total_time"),
    "t_mod4s": (TELEMATICS_POOL, "covariate:total_time"),
    "tm_mod1s": (TRADITIONAL_POOL + TELEMATICS_POOL + MATRIX_TERMS, "covariate:total_time"),
    "tm_mod2s": (TELEMATICS_POOL + MATRIX_TERMS, "covariate:total_time"),
    "tt_mod1s": (TRADITIONAL_POOL + TELEMATICS_POOL + MATRIX_TERMS + ("prop_time",), "covariate:total_time"),
    "tt_mod2s": (TELEMATICS_POOL + MATRIX_TERMS + ("prop_time",), "covariate:total_time"),
}


def model_pool(name: str, family: str = NEGBIN) -> ModelSpec:
    try:
        terms, exposure = MODEL_POOLS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(MODEL_POOLS)}") from None
    return ModelSpec.from_strings(terms, exposure, family)


def _uses_matrix(spec: ModelSpec) -> bool:
    return any(t.column in MATRIX_TERMS for t in spec.terms)


def robustness_sweep(obs: Observations, base: pd.DataFrame, pools: dict[str, ModelSpec], plan: FoldPlan, *,
                     widths=range(2, 31), base_width: int = 10, n_components: int = 2, threshold: int = 3,
                     benchmark: str = "mod3s") -> pd.DataFrame:
    """Out-of-sample metrics of each model for every bin width.

    Term sets are voted once at ``base_width`` and held fixed; only the PC
    scores change with the width.  ``base`` is the feature table without PC
    columns, row-aligned with ``obs``.  The benchmark (traditional covariates
    only by default) is evaluated once and repeated on every row.
    """
    def with_pcs(h):
        _, probs, _ = transition_probs(obs, bin_config_for_width(h))
        scores, _ = pc_scores(probs, n_components)
        df = base.copy()
        for j in range(scores.shape[1]):
            df[f"pc{j + 1}"] = scores[:, j]
        return df

    base_df = with_pcs(base_width)
    names = list(pools)
    if benchmark not in names:
        names.append(benchmark)
        pools = {**pools, benchmark: model_pool(benchmark)}
    finals = {}
    for name in names:
        _, _, finals[name] = majority_vote_select(base_df, pools[name], plan, threshold)
        log.info("robustness: %s fixed to %s", name, [t.name for t in finals[name].terms])

    static = {n: cross_validate(base_df, s, plan).averages for n, s in finals.items() if not _uses_matrix(s)}
    rows = []
    for h in widths:
        df = with_pcs(h) if any(_uses_matrix(s) for s in finals.values()) else base_df
        row = {"h": h, "m": bin_config_for_width(h).m}
        for name in names:
            if name == benchmark:
                continue
            avg = static.get(name) or cross_validate(df, finals[name], plan).averages
            row.update({f"{name}_{k}": v for k, v in avg.items()})
        row.update({f"benchmark_{k}": v for k, v in static.get(benchmark, cross_validate(
            base_df, finals[benchmark], plan).averages).items()})
        rows.append(row)
        log.info("robustness: h=%d done", h)
    return pd.DataFrame(rows)


__all__ = ["CleanedPortfolio", "clean_portfolio", "Observations", "observation_arrays", "observations_from_clean",
           "observations_from_trips", "transition_probs", "pc_scores", "feature_table", "summary_frame",
           "arrival_table", "policy_order", "SLOT_NAMES", "MODEL_POOLS", "model_pool",
           "robustness_sweep"]
