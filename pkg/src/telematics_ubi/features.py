"""Policy-level covariates: speed transition matrices, their principal
components, timeslot and road-type compositions and scalar trip aggregates."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateData, EmptyTripSet, KTooLarge, NegativeSpeed, WidthOutOfRange, ZeroTotalTime

SPEED_LIMIT = 130.0
STATIONARY_EDGE = 0.5
SLOT_SECONDS = 4 * 3600
DAY_SECONDS = 86400
N_SLOTS = 6
SLOT_NAMES = ("prop_0_4", "prop_4_8", "prop_8_12", "prop_12_16", "prop_16_20", "prop_20_24")
ROADTYPE_NAMES = ("prop_urban", "prop_extra_urban", "prop_highway", "prop_other")


@dataclass(frozen=True)
class BinConfig:
    """Speed bins [0, 0.5), [0.5, h), [h, 2h), ..., [K*h, inf) with K = floor(130 / h).

    ``boundaries`` holds the lower edge of every bin.
    """

    boundaries: tuple[float, ...]
    width_h: int

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0.0 or b[1] != STATIONARY_EDGE:
            raise ValueError("bins must start at 0 and 0.5")
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("bin boundaries must be strictly ascending")

    @property
    def m(self) -> int:
        return len(self.boundaries)

    def labels(self) -> list[str]:
        b = self.boundaries
        out = [f"[{_num(lo)},{_num(hi)})" for lo, hi in zip(b, b[1:])]
        out.append(f"[{_num(b[-1])},Inf)")
        return out


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else str(x)


def bin_config_for_width(h: int) -> BinConfig:
    if int(h) != h or not 2 <= h <= 30:
        raise WidthOutOfRange(f"bin width must be an integer in [2, 30], got {h}")
    h = int(h)
    k = int(SPEED_LIMIT // h)
    return BinConfig(boundaries=(0.0, STATIONARY_EDGE) + tuple(float(h * i) for i in range(1, k + 1)), width_h=h)


DEFAULT_BINS = bin_config_for_width(10)


def speed_bin_index(speed: float, cfg: BinConfig = DEFAULT_BINS) -> int:
    if speed < 0:
        raise NegativeSpeed(f"speed {speed} is negative")
    return int(np.searchsorted(cfg.boundaries, speed, side="right")) - 1


def speed_bins(speeds: np.ndarray, cfg: BinConfig = DEFAULT_BINS) -> np.ndarray:
    speeds = np.asarray(speeds, dtype=float)
    if speeds.size and speeds.min() < 0:
        raise NegativeSpeed("negative speed in input")
    return np.searchsorted(np.asarray(cfg.boundaries), speeds, side="right") - 1


# ---------------------------------------------------------------------------
# transition matrices


def accumulate_transitions(
    times: np.ndarray,
    speeds: np.ndarray,
    cfg: BinConfig = DEFAULT_BINS,
    weights: np.ndarray | None = None,
    *,
    trip_ids: np.ndarray | None = None,
    diagnostics: Counter | None = None,
) -> np.ndarray:
    """Add minute-scaled transition weights of consecutive observations.

    ``times`` are in seconds and must be sorted within each trip.  A pair of
    observations ``dt`` seconds apart adds ``60 / dt`` to the cell
    ``(bin(source), bin(target))``.  With ``trip_ids``, only pairs inside the
    same trip contribute.  Pairs with ``dt <= 0`` are skipped and counted under
    ``"non_positive_gap"``.
    """
    m = cfg.m
    if weights is None:
        weights = np.zeros((m, m))
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        return weights
    bins = speed_bins(speeds, cfg)
    dt = np.diff(times)
    keep = np.ones(len(dt), dtype=bool)
    if trip_ids is not None:
        trip_ids = np.asarray(trip_ids)
        keep &= trip_ids[1:] == trip_ids[:-1]
    bad = keep & (dt <= 0)
    if diagnostics is not None and bad.any():
        diagnostics["non_positive_gap"] += int(bad.sum())
    keep &= dt > 0
    cells = bins[:-1][keep] * m + bins[1:][keep]
    weights += np.bincount(cells, weights=60.0 / dt[keep], minlength=m * m).reshape(m, m)
    return weights


@dataclass
class SpeedTransitionMatrix:
    bin_config: BinConfig
    weights: np.ndarray
    probs: np.ndarray
    visited_rows: np.ndarray

    def flatten(self) -> np.ndarray:
        return self.probs.ravel()

    def to_dict(self) -> dict:
        return {
            "probs": [[float(x) for x in row] for row in self.probs],
            "visited_rows": [bool(v) for v in self.visited_rows],
        }


def normalize_rows(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalise the last two axes; unvisited rows stay zero."""
    sums = weights.sum(axis=-1, keepdims=True)
    visited = sums[..., 0] > 0
    probs = np.divide(weights, sums, out=np.zeros_like(weights, dtype=float), where=sums > 0)
    return probs, visited


def normalize_matrix(weights: np.ndarray, cfg: BinConfig = DEFAULT_BINS) -> SpeedTransitionMatrix:
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (cfg.m, cfg.m):
        raise ValueError(f"expected a {cfg.m}x{cfg.m} weight matrix, got {weights.shape}")
    if (weights < 0).any():
        raise ValueError("transition weights must be non-negative")
    probs, visited = normalize_rows(weights)
    return SpeedTransitionMatrix(cfg, weights, probs, visited)


def policy_transition_weights(
    policy_index: np.ndarray,
    trip_index: np.ndarray,
    times: np.ndarray,
    speeds: np.ndarray,
    n_policies: int,
    cfg: BinConfig = DEFAULT_BINS,
    diagnostics: Counter | None = None,
) -> np.ndarray:
    """Transition weights for many policies at once, shape ``(n_policies, m, m)``.

    Inputs are parallel arrays of valid observations, grouped by trip and
    sorted by time inside each trip.  ``trip_index`` must be unique across
    policies.
    """
    m = cfg.m
    out = np.zeros(n_policies * m * m)
    if len(times) >= 2:
        bins = speed_bins(speeds, cfg)
        dt = np.diff(np.asarray(times, dtype=float))
        same = trip_index[1:] == trip_index[:-1]
        bad = same & (dt <= 0)
        if diagnostics is not None and bad.any():
            diagnostics["non_positive_gap"] += int(bad.sum())
        keep = same & (dt > 0)
        cells = policy_index[1:][keep] * (m * m) + bins[:-1][keep] * m + bins[1:][keep]
        out += np.bincount(cells, weights=60.0 / dt[keep], minlength=n_policies * m * m)
    return out.reshape(n_policies, m, m)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAModel:
    mean_vector: np.ndarray
    loadings: np.ndarray  # (n_components, n_features), rows orthonormal
    explained_variance: np.ndarray
    degenerate: bool = False

    @property
    def n_components(self) -> int:
        return self.loadings.shape[0]

    def explained_variance_ratio(self) -> np.ndarray:
        total = self.explained_variance.sum()
        return self.explained_variance / total if total > 0 else np.zeros_like(self.explained_variance)

    def to_dict(self, k: int | None = None) -> dict:
        k = self.n_components if k is None else k
        return {
            "mean_vector": self.mean_vector.tolist(),
            "loadings": self.loadings[:k].tolist(),
            "explained_variance": self.explained_variance[:k].tolist(),
            "explained_variance_ratio": self.explained_variance_ratio()[:k].tolist(),
            "degenerate": self.degenerate,
        }


def pca_fit(matrices) -> PCAModel:
    """Principal components of flattened transition matrices (one row per policy).

    Data are centred but not scaled.  Each loading is signed so that its
    largest-magnitude entry is positive.
    """
    X = np.asarray(matrices, dtype=float)
    if X.ndim == 3:
        X = X.reshape(len(X), -1)
    n, p = X.shape
    if n < 2:
        raise DegenerateData("PCA needs at least two policies")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s**2 / (n - 1)
    degenerate = not np.any(var > 1e-14 * max(1.0, np.abs(X).max()))
    if degenerate:
        var = np.zeros_like(var)
    lead = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(len(vt)), lead])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    return PCAModel(mean_vector=mean, loadings=vt, explained_variance=var, degenerate=degenerate)


def pca_project(matrix, model: PCAModel, k: int) -> np.ndarray:
    """Scores on the first ``k`` components; accepts one matrix or a stack."""
    if k > model.n_components:
        raise KTooLarge(f"requested {k} components, model has {model.n_components}")
    x = np.asarray(matrix.probs if isinstance(matrix, SpeedTransitionMatrix) else matrix, dtype=float)
    single = x.ndim == 1 or (x.ndim == 2 and x.size == model.mean_vector.size)
    x = x.reshape(1 if single else len(x), -1)
    scores = (x - model.mean_vector) @ model.loadings[:k].T
    return scores[0] if single else scores


# ---------------------------------------------------------------------------
# time of day


def _slot_cumulative(t: np.ndarray, slot: int) -> np.ndarray:
    """Seconds spent in ``slot`` between the epoch and ``t``."""
    days, rem = np.divmod(t, DAY_SECONDS)
    return days * SLOT_SECONDS + np.clip(rem - slot * SLOT_SECONDS, 0, SLOT_SECONDS)


def timeslot_seconds(starts, ends) -> np.ndarray:
    """Seconds of driving per 4-hour wall-clock slot, shape ``(n_trips, 6)``."""
    s = np.asarray(starts, dtype=np.int64)
    e = np.asarray(ends, dtype=np.int64)
    return np.stack([_slot_cumulative(e, j) - _slot_cumulative(s, j) for j in range(N_SLOTS)], axis=-1).astype(float)


def timeslot_proportions(starts, ends) -> np.ndarray:
    """Percentage of total driving time in each slot, trips split at slot edges."""
    per = timeslot_seconds(starts, ends).reshape(-1, N_SLOTS).sum(axis=0)
    total = per.sum()
    if total <= 0:
        raise ZeroTotalTime("trips have no driving time")
    return 100.0 * per / total


def classify_trip_timeslot(start: int, end: int, spill_minutes: float = 15.0) -> int:
    """Slot a trip belongs to for per-timeslot behaviour summaries.

    Trips go to the slot they start in.  A trip starting in the last hour of
    its slot that runs ``spill_minutes`` or more past the slot edge is counted
    in the next slot instead.
    """
    rem = int(start) % DAY_SECONDS
    slot = rem // SLOT_SECONDS
    boundary = int(start) - rem + (slot + 1) * SLOT_SECONDS
    if boundary - int(start) <= 3600 and int(end) >= boundary + spill_minutes * 60:
        return (slot + 1) % N_SLOTS
    return slot


# ---------------------------------------------------------------------------
# aggregates


@dataclass
class PolicySummary:
    policy_id: object
    total_distance: float
    total_time: float  # minutes
    num_trips: int
    avg_speed: float
    max_speed: float
    num_acc: int
    num_brake: int
    num_left: int
    num_right: int
    num_severe: int
    prop_roadtype: np.ndarray
    prop_time: np.ndarray
    pc_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_row(self) -> dict:
        row = {
            "policy_id": self.policy_id,
            "total_distance": self.total_distance,
            "total_time": self.total_time,
            "num_trips": self.num_trips,
            "avg_speed": self.avg_speed,
            "max_speed": self.max_speed,
            "num_acc": self.num_acc,
            "num_brake": self.num_brake,
            "num_left": self.num_left,
            "num_right": self.num_right,
            "num_severe": self.num_severe,
        }
        row.update(zip(ROADTYPE_NAMES, map(float, self.prop_roadtype)))
        row.update(zip(SLOT_NAMES, map(float, self.prop_time)))
        row.update({f"pc{j + 1}": float(v) for j, v in enumerate(self.pc_scores)})
        return row


def aggregate_arrays(
    start_ts, end_ts, duration_s, distance_km, avg_speed, max_speed, harsh, roadtype, policy_id=None
) -> PolicySummary:
    duration = np.asarray(duration_s, dtype=float)
    if duration.size == 0:
        raise EmptyTripSet("no trips to aggregate")
    total_s = duration.sum()
    if total_s <= 0:
        raise ZeroTotalTime("trips have no driving time")
    w = duration / total_s
    harsh = np.asarray(harsh, dtype=np.int64).reshape(-1, 5).sum(axis=0)
    return PolicySummary(
        policy_id=policy_id,
        total_distance=float(np.sum(distance_km)),
        total_time=float(total_s / 60.0),
        num_trips=int(duration.size),
        avg_speed=float(np.dot(w, avg_speed)),
        max_speed=float(np.max(max_speed)),
        num_acc=int(harsh[0]),
        num_brake=int(harsh[1]),
        num_left=int(harsh[2]),
        num_right=int(harsh[3]),
        num_severe=int(harsh[4]),
        prop_roadtype=w @ np.asarray(roadtype, dtype=float).reshape(-1, 4),
        prop_time=timeslot_proportions(start_ts, end_ts),
    )


def policy_aggregates(trips: Sequence, policy_id=None) -> PolicySummary:
    """Policy totals over retained trips; speeds and road types are
    duration-weighted, maxima and harsh counts pooled."""
    if not trips:
        raise EmptyTripSet("no trips to aggregate")
    e = [t.trip_list for t in trips]
    return aggregate_arrays(
        [x.start_ts for x in e],
        [x.end_ts for x in e],
        [x.duration_s for x in e],
        [x.distance_km for x in e],
        [x.avg_speed for x in e],
        [x.max_speed for x in e],
        [t.harsh_counts.as_tuple() for t in trips],
        [x.roadtype_props for x in e],
        policy_id=policy_id,
    )


def matrices_to_json(cfg: BinConfig, policy_ids: Sequence, probs: np.ndarray, visited: np.ndarray) -> dict:
    return {
        "bin_width": cfg.width_h,
        "bin_boundaries": list(cfg.boundaries),
        "bin_labels": cfg.labels(),
        "policies": {
            str(pid): {"probs": p.tolist(), "visited_rows": v.tolist()} for pid, p, v in zip(policy_ids, probs, visited)
        },
    }


def is_row_stochastic(probs: np.ndarray, tol: float = 1e-9) -> bool:
    sums = probs.sum(axis=-1)
    visited = sums > 0
    return bool(np.all(np.abs(sums[visited] - 1.0) <= tol)) and math.isfinite(float(probs.sum()))
