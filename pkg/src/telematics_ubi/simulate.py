"""Synthetic telematics portfolios with known ground truth, and injection of
the recording defects seen in real raw streams.

Every policy draws from its own generator seeded by ``(seed, policy_index)``,
so a portfolio is reproducible and policies can be generated independently.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigInvalid
from .features import DEFAULT_BINS, BinConfig
from .ingest import (
    AVG_SPEED_RANGE,
    MIN_DURATION_S,
    MIN_MAX_SPEED,
    EventKind,
    RecordTable,
    TripListEntry,
    date_to_epoch,
)

TOP_SPEED = 160  # ceiling for speeds drawn in the open-ended last bin
HARSH_05G = (EventKind.HARSH_ACCEL, EventKind.HARSH_BRAKE, EventKind.HARSH_LEFT, EventKind.HARSH_RIGHT)


def cruising_chain(cruise_bin: float, m: int = DEFAULT_BINS.m, spread: float = 1.0, pull: float = 0.3,
                   stop_prob: float = 0.03) -> np.ndarray:
    """Row-stochastic speed chain drifting towards ``cruise_bin``.

    From bin ``i`` the next bin is roughly normal around ``i + pull*(c - i)``.
    Moving bins stop (bin 0) with a small extra probability and bin 0 mostly
    stays or moves off slowly.
    """
    idx = np.arange(m)
    P = np.zeros((m, m))
    for i in range(m):
        centre = i + pull * (cruise_bin - i)
        P[i] = np.exp(-0.5 * ((idx - centre) / spread) ** 2)
        P[i] /= P[i].sum()
        if i > 0:
            P[i] *= 1 - stop_prob
            P[i, 0] += stop_prob
    P[0] = 0.0
    P[0, 0], P[0, 1], P[0, 2] = 0.3, 0.4, 0.3
    return P / P.sum(axis=1, keepdims=True)


def default_chains() -> list[list[list[float]]]:
    return [cruising_chain(c).tolist() for c in (4.0, 7.0, 10.0)]


# wall-clock hour profiles of trip starts for each driver type
_HOUR_PROFILES = np.array([
    [0.2] * 6 + [2, 4, 4, 3, 3, 3, 3, 3, 3, 4, 4, 3, 2, 1, 0.8, 0.5, 0.3, 0.2],
    [0.2] * 6 + [3, 6, 4, 2, 2, 2, 2, 2, 3, 5, 6, 4, 2, 1, 0.8, 0.5, 0.3, 0.2],
    [1.0] * 6 + [1, 2, 2, 2, 2, 2, 2, 2, 2, 3, 3, 3, 4, 4, 4, 4, 3, 2],
])


@dataclass
class SimConfig:
    n_policies: int = 100
    seed: int = 0
    start_year: int = 2018
    trips_per_day: float = 0.8
    trips_per_day_shape: float = 4.0  # gamma shape of per-policy trip frequency
    trip_minutes_median: float = 15.0
    trip_minutes_sigma: float = 0.7
    speed_markov: list = field(default_factory=default_chains)
    bin_width: int = 10
    harsh_rates: tuple = (0.0008, 0.0008, 0.0005, 0.0005)  # per driving minute
    harsh_multiplier_shape: float = 3.0
    severe_rate: float = 1.0  # a in Lambda(t) = a * t**beta, t in driving hours
    severe_learning_beta: float = 0.5
    claim_model: dict = field(default_factory=lambda: {
        "intercept": -5.6,
        "log_total_time": 0.55,
        "car_value": 1.07e-6,
        "max_weight": -0.0003,
        "use_personal": 0.23,
        "driver_type": [0.0, 0.2, 0.45],
        "log_harsh_multiplier": 0.3,
    })
    claim_theta: float = 1.2
    defect_rates: dict = field(default_factory=lambda: {"out_of_order": 0.0, "invalid_gps": 0.0,
                                                         "missing_keyoff": 0.0})
    cancel_rate: float = 0.1
    late_start_rate: float = 0.02
    junk_trip_rate: float = 0.01
    age_missing_rate: float = 0.37

    def __post_init__(self):
        self.validate()

    @property
    def bins(self) -> BinConfig:
        from .features import bin_config_for_width

        return bin_config_for_width(self.bin_width)

    def validate(self) -> None:
        if self.n_policies < 1:
            raise ConfigInvalid("n_policies must be positive")
        if not 0 < self.severe_learning_beta <= 1:
            raise ConfigInvalid("severe_learning_beta must lie in (0, 1]")
        m = self.bins.m
        for P in self.speed_markov:
            P = np.asarray(P, dtype=float)
            if P.shape != (m, m) or (P < 0).any() or np.abs(P.sum(axis=1) - 1).max() > 1e-12:
                raise ConfigInvalid(f"speed_markov matrices must be {m}x{m} row-stochastic")
        rates = list(self.harsh_rates) + [self.cancel_rate, self.late_start_rate, self.junk_trip_rate,
                                          self.age_missing_rate] + list(self.defect_rates.values())
        if any(not 0 <= r <= 1 for r in rates):
            raise ConfigInvalid("rates and probabilities must lie in [0, 1]")
        unknown = set(self.defect_rates) - {"out_of_order", "invalid_gps", "missing_keyoff"}
        if unknown:
            raise ConfigInvalid(f"unknown defect kinds {sorted(unknown)}")
        if self.trips_per_day <= 0 or self.trip_minutes_median < 3 or self.claim_theta <= 0:
            raise ConfigInvalid("trip frequency, trip length and claim theta must be positive")
        if len(self.claim_model.get("driver_type", [0])) < len(self.speed_markov):
            raise ConfigInvalid("claim_model.driver_type needs one effect per speed chain")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["harsh_rates"] = list(self.harsh_rates)
        return d


@dataclass
class GroundTruth:
    matrix_id: np.ndarray  # generating chain per policy
    chains: np.ndarray  # (n_types, m, m)
    transition_counts: np.ndarray  # realised chain transitions of retained trips (n, m, m)
    true_mu: np.ndarray
    claim_count: np.ndarray
    harsh_multiplier: np.ndarray
    total_time: np.ndarray  # minutes of retained driving in coverage
    severe_times: list[np.ndarray]  # cumulative driving hours of each severe event
    policy_ids: list[str]

    def to_dict(self) -> dict:
        return {
            "policy_ids": self.policy_ids,
            "matrix_id": self.matrix_id.tolist(),
            "chains": self.chains.tolist(),
            "true_mu": self.true_mu.tolist(),
            "claim_count": self.claim_count.tolist(),
            "harsh_multiplier": self.harsh_multiplier.tolist(),
            "total_time": self.total_time.tolist(),
            "severe_times": [t.tolist() for t in self.severe_times],
            "transition_counts": self.transition_counts.astype(int).tolist(),
        }


@dataclass
class Portfolio:
    records: RecordTable
    trips: list[TripListEntry]
    policies: pd.DataFrame
    truth: GroundTruth


def _speeds_for_bins(states: np.ndarray, cfg: BinConfig, rng) -> np.ndarray:
    lo = np.ceil(np.asarray(cfg.boundaries)).astype(np.int64)
    hi = np.concatenate([lo[1:], [TOP_SPEED + 1]])
    lo[0], hi[0] = 0, 1
    return rng.integers(lo[states], hi[states])


def _simulate_policy(cfg: SimConfig, i: int, chains: np.ndarray, bins: BinConfig):
    rng = np.random.default_rng([cfg.seed, i])
    m = bins.m
    n_types = len(chains)
    mtype = int(rng.integers(n_types))
    cum = np.cumsum(chains[mtype], axis=1)
    cum[:, -1] = 1.0
    device = str(2000000 + i)
    policy_id = f"P{i:06d}"

    year = cfg.start_year + int(rng.integers(2))
    cov_start = date(year, 1, 1) + timedelta(days=int(rng.integers(365)))
    cov_end_full = cov_start + timedelta(days=364)
    cancelled = bool(rng.random() < cfg.cancel_rate)
    cov_end = cov_start + timedelta(days=int(rng.integers(120, 300))) if cancelled else cov_end_full
    late = bool(rng.random() < cfg.late_start_rate)
    tele_start = cov_start + timedelta(days=int(rng.integers(100, 160)) if late else 0)
    tele_end = min(cov_end + timedelta(days=30), cov_end_full) if cancelled else cov_end
    n_days = (tele_end - tele_start).days + 1

    # trip start times
    rate = cfg.trips_per_day * rng.gamma(cfg.trips_per_day_shape, 1 / cfg.trips_per_day_shape)
    per_day = rng.poisson(rate, n_days)
    n_trips = int(per_day.sum())
    profile = _HOUR_PROFILES[mtype % len(_HOUR_PROFILES)] * rng.gamma(20, 1 / 20, 24)
    profile = profile / profile.sum()
    day = np.repeat(np.arange(n_days), per_day)
    hour = rng.choice(24, n_trips, p=profile)
    offs = np.sort(day * 86400 + hour * 3600 + rng.integers(0, 3600, n_trips))
    minutes = np.clip(np.round(rng.lognormal(math.log(cfg.trip_minutes_median), cfg.trip_minutes_sigma, n_trips)),
                      4, 180).astype(np.int64)
    base = date_to_epoch(tele_start)
    starts = np.empty(n_trips, dtype=np.int64)
    prev_end = -10**12
    for j in range(n_trips):
        s = max(base + int(offs[j]), prev_end + 600)
        starts[j] = s
        prev_end = s + 60 * int(minutes[j])
    ends = starts + 60 * minutes

    # speed chains, all trips of the policy advanced together
    lmax = int(minutes.max()) if n_trips else 0
    states = np.zeros((n_trips, lmax + 1), dtype=np.int64)
    for step in range(1, lmax + 1):
        u = rng.random(n_trips)
        prev = states[:, step - 1]
        states[:, step] = np.minimum((u[:, None] > cum[prev]).sum(axis=1), m - 1)
    speeds = _speeds_for_bins(states, bins, rng)
    tick = np.arange(lmax + 1)[None, :]
    active = tick <= minutes[:, None]
    speeds = np.where(active, speeds, 0)
    states_kept = np.where(active, states, -1)

    moving = active & (tick < minutes[:, None])
    distance = (speeds * moving).sum(axis=1) / 60.0
    max_speed = speeds.max(axis=1) if n_trips else np.zeros(0)
    # rounded once so the retention rule below sees what the trip list stores
    distance = np.round(distance, 3)
    avg_speed = np.round(distance / (minutes / 60.0), 3)

    # harsh events: homogeneous 0.5G kinds and a power-law severe process
    mult = rng.gamma(cfg.harsh_multiplier_shape, 1 / cfg.harsh_multiplier_shape)
    hours_before = np.concatenate([[0], np.cumsum(minutes)])[:-1] / 60.0
    total_hours = float(minutes.sum() / 60.0)
    a = cfg.severe_rate * mult
    beta = cfg.severe_learning_beta
    severe_t = []
    g = rng.exponential()
    while a * total_hours**beta > g:
        severe_t.append((g / a) ** (1 / beta))
        g += rng.exponential()
    severe_t = np.array(severe_t)

    event_trip, event_off, event_kind = [], [], []
    used: dict[int, set] = {}

    def place(j: int, off: int):
        L = int(minutes[j]) * 60
        taken = used.setdefault(j, set())
        for _ in range(L):
            off = off % L
            if off % 60 and off not in taken:
                taken.add(off)
                return off
            off += 1
        return None

    if len(severe_t):
        sj = np.searchsorted(hours_before, severe_t, side="right") - 1
        for t, j in zip(severe_t, sj):
            off = place(int(j), int((t - hours_before[j]) * 3600))
            if off is not None:
                event_trip.append(int(j)), event_off.append(off), event_kind.append(int(EventKind.SEVERE_HARSH))
    for kind, r in zip(HARSH_05G, cfg.harsh_rates):
        n_ev = rng.poisson(r * mult * minutes)
        for j in np.flatnonzero(n_ev):
            for off in rng.integers(1, int(minutes[j]) * 60, n_ev[j]):
                off = place(int(j), int(off))
                if off is not None:
                    event_trip.append(int(j)), event_off.append(off), event_kind.append(int(kind))
    event_trip = np.array(event_trip, dtype=np.int64)
    event_off = np.array(event_off, dtype=np.int64)
    event_kind = np.array(event_kind, dtype=np.int8)

    # assemble the record stream
    tj, tk = np.nonzero(active)
    rec_ts = starts[tj] + 60 * tk
    rec_speed = speeds[tj, tk].astype(float)
    rec_kind = np.full(len(tj), int(EventKind.POSITION_IN_TIME), dtype=np.int8)
    rec_kind[tk == 0] = int(EventKind.KEY_ON)
    rec_kind[tk == minutes[tj]] = int(EventKind.KEY_OFF)
    rec_dir = rng.integers(0, 360, len(tj)).astype(float)
    rec_dir[rec_speed == 0] = 0.0
    if len(event_trip):
        ev_tick = event_off // 60
        ev_ts = starts[event_trip] + event_off
        ev_speed = speeds[event_trip, ev_tick].astype(float)
        ev_dir = rng.integers(0, 360, len(event_trip)).astype(float)
        rec_ts = np.concatenate([rec_ts, ev_ts])
        rec_speed = np.concatenate([rec_speed, ev_speed])
        rec_kind = np.concatenate([rec_kind, event_kind])
        rec_dir = np.concatenate([rec_dir, ev_dir])
    order = np.argsort(rec_ts, kind="stable")
    records = (rec_ts[order], rec_dir[order], rec_speed[order], rec_kind[order])

    # trip list, including a few junk entries like those found in practice
    props = rng.dirichlet([4, 2, 2, 1], n_trips) * 100
    props = np.round(props, 2)
    props[:, 3] = np.round(100 - props[:, :3].sum(axis=1), 2)
    props = np.maximum(props, 0)
    entries = []
    for j in range(n_trips):
        entries.append(TripListEntry(device, int(starts[j]), int(ends[j]), float(distance[j]),
                                     float(minutes[j] * 60), float(avg_speed[j]), float(max_speed[j]),
                                     tuple(float(p) for p in props[j])))
        if rng.random() < cfg.junk_trip_rate:
            entries.append(TripListEntry(device, int(starts[j]), int(starts[j]) + 3, 1.3, 3.0, 1560.0, 0.0,
                                         (100.0, 0.0, 0.0, 0.0)))

    # exposure as the cleaning stage will see it: retained trips in coverage
    in_cov = (starts >= date_to_epoch(cov_start)) & (starts < date_to_epoch(cov_end) + 86400)
    passes = ((minutes * 60 >= MIN_DURATION_S) & (avg_speed >= AVG_SPEED_RANGE[0])
              & (avg_speed <= AVG_SPEED_RANGE[1]) & (max_speed >= MIN_MAX_SPEED))
    retained = in_cov & passes
    total_time = float(minutes[retained].sum())
    src, dst = states_kept[retained, :-1], states_kept[retained, 1:]
    ok = (src >= 0) & (dst >= 0)
    counts = np.bincount(src[ok] * m + dst[ok], minlength=m * m).astype(float)

    car_value = float(np.round(rng.lognormal(math.log(150000), 0.4), -2))
    max_weight = float(np.round(rng.normal(2150, 400), -1))
    use = "personal" if rng.random() < 0.6 else "others"
    cm = cfg.claim_model
    eta = (cm["intercept"] + cm["log_total_time"] * math.log(max(total_time, 1.0)) + cm["car_value"] * car_value
           + cm["max_weight"] * max_weight + cm["use_personal"] * (use == "personal")
           + cm["driver_type"][mtype] + cm["log_harsh_multiplier"] * math.log(mult))
    mu = math.exp(eta)
    theta = cfg.claim_theta
    claims = int(rng.negative_binomial(theta, theta / (theta + mu)))
    age = float(np.clip(np.round(rng.normal(43, 12)), 18, 90))
    if rng.random() < cfg.age_missing_rate:
        age = float("nan")
    policy = {
        "policy_id": policy_id,
        "device_id": device,
        "coverage_start": cov_start.isoformat(),
        "coverage_end": cov_end.isoformat(),
        "cancelled": int(cancelled),
        "claim_count": claims,
        "policy_period": round(((cov_end - cov_start).days + 1) / 365.0, 6),
        "car_value": car_value,
        "max_weight": max_weight,
        "vehicle_age": int(rng.poisson(2.2)),
        "num_seats": int(rng.choice([2, 4, 5, 5, 5, 7])),
        "renewal": int(rng.random() < 0.4),
        "use": use,
        "region2": f"R{int(rng.integers(1, 5))}",
        "age": age,
    }
    truth = dict(mtype=mtype, counts=counts.reshape(m, m), mu=mu, claims=claims, mult=mult, total_time=total_time,
                 severe=severe_t)
    return device, records, entries, policy, truth


def simulate_portfolio(cfg: SimConfig) -> Portfolio:
    """Generate raw records, trip lists, a policy table and the ground truth."""
    cfg.validate()
    bins = cfg.bins
    chains = np.asarray(cfg.speed_markov, dtype=float)
    devices, parts, trips, policies, truths = [], [], [], [], []
    for i in range(cfg.n_policies):
        device, rec, entries, policy, truth = _simulate_policy(cfg, i, chains, bins)
        devices.append(device)
        parts.append(rec)
        trips.extend(entries)
        policies.append(policy)
        truths.append(truth)
    sizes = [len(p[0]) for p in parts]
    records = RecordTable(
        devices=devices,
        device=np.repeat(np.arange(len(devices), dtype=np.int32), sizes),
        timestamp=np.concatenate([p[0] for p in parts]).astype(np.int64),
        direction=np.concatenate([p[1] for p in parts]),
        speed=np.concatenate([p[2] for p in parts]),
        kind=np.concatenate([p[3] for p in parts]).astype(np.int8),
        gps_valid=np.ones(sum(sizes), dtype=bool),
    )
    truth = GroundTruth(
        matrix_id=np.array([t["mtype"] for t in truths]),
        chains=chains,
        transition_counts=np.stack([t["counts"] for t in truths]),
        true_mu=np.array([t["mu"] for t in truths]),
        claim_count=np.array([t["claims"] for t in truths]),
        harsh_multiplier=np.array([t["mult"] for t in truths]),
        total_time=np.array([t["total_time"] for t in truths]),
        severe_times=[t["severe"] for t in truths],
        policy_ids=[p["policy_id"] for p in policies],
    )
    rates = cfg.defect_rates
    if any(rates.values()):
        records, _ = inject_defects(records, rates, cfg.seed)
    return Portfolio(records, trips, pd.DataFrame(policies), truth)


# ---------------------------------------------------------------------------
# defects


def _trip_segments(kind: np.ndarray, lo: int, hi: int) -> list[tuple[int, int]]:
    on = np.flatnonzero(kind[lo:hi] == int(EventKind.KEY_ON)) + lo
    if len(on) == 0:
        return [(lo, hi)] if hi > lo else []
    bounds = list(on) + [hi]
    segs = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    if on[0] > lo:
        segs.insert(0, (lo, int(on[0])))
    return segs


def inject_defects(records: RecordTable, defect_rates: dict, seed: int = 0) -> tuple[RecordTable, list[dict]]:
    """Corrupt a clean, device-grouped, chronological stream.

    Per trip (records from one KeyOn to the next) and with the given
    probabilities:

    * ``out_of_order``: a contiguous block is moved to a later position;
    * ``invalid_gps``: the first records after KeyOn lose their GPS fix and a
      FixGpsOk record is inserted where the fix returns;
    * ``missing_keyoff``: the trip's KeyOff record is deleted.

    Returns the corrupted table and a manifest describing every defect.
    """
    rates = {k: float(defect_rates.get(k, 0.0)) for k in ("out_of_order", "invalid_gps", "missing_keyoff")}
    if not any(rates.values()):
        return records, []
    rng = np.random.default_rng([seed, 7919])
    KEY_OFF, FIX = int(EventKind.KEY_OFF), int(EventKind.FIX_GPS_OK)
    ts, sp, di, kd, va = (records.timestamp.copy(), records.speed.copy(), records.direction.copy(),
                          records.kind.copy(), records.gps_valid.copy())
    n = len(ts)
    manifest: list[dict] = []
    delete = np.zeros(n, dtype=bool)
    inserts: list[tuple[int, int, int]] = []  # (insert before original row, timestamp, device)
    moves: list[tuple[int, int, int]] = []  # (block start, block end, move after this row)

    change = np.flatnonzero(np.diff(records.device)) + 1
    dev_bounds = list(zip(np.concatenate([[0], change]).tolist(), np.concatenate([change, [n]]).tolist()))
    for lo, hi in dev_bounds:
        device = records.devices[int(records.device[lo])]
        for t_idx, (a, b) in enumerate(_trip_segments(kd, lo, hi)):
            size = b - a
            if rates["invalid_gps"] and size >= 4 and rng.random() < rates["invalid_gps"]:
                k = int(rng.integers(1, min(3, size - 2) + 1))
                rows = np.arange(a + 1, a + 1 + k)
                rows = rows[(kd[rows] != KEY_OFF)]
                if len(rows):
                    va[rows] = False
                    sp[rows] = 0.0
                    di[rows] = 0.0
                    nxt = int(rows[-1]) + 1
                    fix_ts = int(ts[rows[-1]]) + 1
                    while fix_ts in set(ts[a:b].tolist()) and fix_ts < ts[nxt]:
                        fix_ts += 1
                    inserts.append((nxt, fix_ts, int(records.device[lo])))
                    manifest.append({"defect": "invalid_gps", "device_id": device, "trip": t_idx,
                                     "invalid_rows": len(rows), "fix_ts": fix_ts})
            if rates["missing_keyoff"] and rng.random() < rates["missing_keyoff"]:
                off = np.flatnonzero(kd[a:b] == KEY_OFF)
                if len(off):
                    delete[a + off[-1]] = True
                    manifest.append({"defect": "missing_keyoff", "device_id": device, "trip": t_idx,
                                     "timestamp": int(ts[a + off[-1]])})
            if rates["out_of_order"] and size >= 4 and rng.random() < rates["out_of_order"]:
                s = int(rng.integers(a + 1, b - 2))
                e = int(rng.integers(s + 1, min(s + 6, b - 1) + 1))
                after = int(rng.integers(e, min(e + 6, hi - 1) + 1))
                if after >= e:
                    moves.append((s, e, after))
                    manifest.append({"defect": "out_of_order", "device_id": device, "trip": t_idx,
                                     "block_size": e - s, "displaced_by": after - e + 1})

    # position key: original row index, shifted for moved blocks and inserts
    key = np.arange(n, dtype=float)
    taken = np.zeros(n, dtype=bool)
    for s, e, after in moves:
        if taken[s:after + 1].any():
            continue
        taken[s:after + 1] = True
        key[s:e] = after + 0.5 + np.arange(e - s) / (2.0 * (e - s + 1))
    new_ts = [ts]
    new = {"sp": [sp], "di": [di], "kd": [kd], "va": [va], "dev": [records.device]}
    new_key = [key]
    for before, fts, dev in inserts:
        new_key.append(np.array([before - 0.25]))
        new_ts.append(np.array([fts], dtype=np.int64))
        new["sp"].append(np.array([0.0]))
        new["di"].append(np.array([0.0]))
        new["kd"].append(np.array([FIX], dtype=np.int8))
        new["va"].append(np.array([False]))
        new["dev"].append(np.array([dev], dtype=np.int32))
    keep = np.concatenate([~delete, np.ones(len(inserts), dtype=bool)])
    allkey = np.concatenate(new_key)[keep]
    order = np.argsort(allkey, kind="stable")

    def col(name, arrs):
        return np.concatenate(arrs)[keep][order]

    out = RecordTable(
        devices=records.devices,
        device=col("dev", new["dev"]),
        timestamp=col("ts", new_ts),
        direction=col("di", new["di"]),
        speed=col("sp", new["sp"]),
        kind=col("kd", new["kd"]),
        gps_valid=col("va", new["va"]),
    )
    return out, manifest


# ---------------------------------------------------------------------------
# writers


def write_policies(path, policies: pd.DataFrame) -> None:
    policies.to_csv(path, index=False, float_format="%.10g")


def write_ground_truth(path, cfg: SimConfig, truth: GroundTruth) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_dict(), "truth": truth.to_dict()}, fh, sort_keys=True)


# ---------------------------------------------------------------------------
# feature-level generators for regression checks


def simulate_selection_data(n: int = 2000, seed: int = 0, n_pool: int = 8, true_terms: Sequence[int] = (0, 1, 2),
                            coef: float = 0.35, theta: float = 1.5, rho: float = 0.3) -> tuple[pd.DataFrame, list[str]]:
    """Feature table with ``n_pool`` equicorrelated standard-normal covariates
    of which ``true_terms`` drive NB2 claim counts; exposure is total_time."""
    rng = np.random.default_rng([seed, 101])
    z = rng.normal(size=(n, 1))
    X = math.sqrt(rho) * z + math.sqrt(1 - rho) * rng.normal(size=(n, n_pool))
    names = [f"x{j + 1}" for j in range(n_pool)]
    total_time = rng.lognormal(math.log(6000), 0.6, n)
    eta = -4.5 + 0.55 * np.log(total_time) + coef * X[:, list(true_terms)].sum(axis=1)
    mu = np.exp(eta)
    y = rng.negative_binomial(theta, theta / (theta + mu))
    df = pd.DataFrame(X, columns=names)
    df["total_time"] = total_time
    df["claim_count"] = y
    return df, [names[j] for j in true_terms]


def simulate_exposure_data(n: int = 1500, seed: int = 0, exposure_coef: float = 0.55, theta: float = 1.2,
                           sigma: float = 1.0) -> pd.DataFrame:
    """Claims driven by a power of a right-skewed (lognormal) exposure."""
    rng = np.random.default_rng([seed, 202])
    total_time = rng.lognormal(math.log(5000), sigma, n)
    x = rng.normal(size=n)
    mu = np.exp(-5.3 + exposure_coef * np.log(total_time) + 0.2 * x)
    y = rng.negative_binomial(theta, theta / (theta + mu))
    return pd.DataFrame({"x": x, "total_time": total_time, "claim_count": y})


def simulate_nb_claims(n: int = 1500, seed: int = 0, theta: float = 1.0, beta=(-0.8, 0.5)) -> pd.DataFrame:
    rng = np.random.default_rng([seed, 303])
    x = rng.normal(size=n)
    mu = np.exp(beta[0] + beta[1] * x)
    y = rng.negative_binomial(theta, theta / (theta + mu))
    return pd.DataFrame({"x": x, "claim_count": y})


def realized_probs(truth: GroundTruth) -> np.ndarray:
    from .features import normalize_rows

    return normalize_rows(truth.transition_counts.astype(float))[0]


__all__ = [
    "SimConfig", "GroundTruth", "Portfolio", "simulate_portfolio", "inject_defects", "cruising_chain",
    "simulate_selection_data", "simulate_exposure_data", "simulate_nb_claims", "write_policies",
    "write_ground_truth", "realized_probs",
]
