"""Learning effects: power-law fits of harsh-event rank against cumulative
driving time (or distance), their curvature, and age-band interactions."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import InsufficientData, ZeroTimeEvent
from .ingest import EventKind


class EventType(str, Enum):
    ACCEL = "accel"
    BRAKE = "brake"
    LEFT = "left"
    RIGHT = "right"
    SEVERE = "severe"

    @classmethod
    def from_kind(cls, kind: int) -> EventType:
        return _KIND_TO_TYPE[EventKind(kind)]


_KIND_TO_TYPE = {
    EventKind.HARSH_ACCEL: EventType.ACCEL,
    EventKind.HARSH_BRAKE: EventType.BRAKE,
    EventKind.HARSH_LEFT: EventType.LEFT,
    EventKind.HARSH_RIGHT: EventType.RIGHT,
    EventKind.SEVERE_HARSH: EventType.SEVERE,
}
EVENT_TYPES = tuple(t.value for t in EventType)
AGE_GROUPS = ("young", "mid", "old")
ARRIVAL_COLUMNS = ["policy_id", "event_type", "rank_k", "cum_time_t", "claim_group", "age_group"]


def age_group(age) -> str | None:
    """Young below 40, mid 40-59, old 60 and above; missing ages give None."""
    if age is None or (isinstance(age, float) and math.isnan(age)):
        return None
    age = float(age)
    if age < 40:
        return "young"
    return "mid" if age < 60 else "old"


def build_event_sequences(
    policy_id,
    trip_starts: Sequence[int],
    trip_ends: Sequence[int],
    event_ts: Sequence[int],
    event_kinds: Sequence[int],
    *,
    trip_distances: Sequence[float] | None = None,
    claim_group: str | None = None,
    age_group: str | None = None,
    diagnostics: Counter | None = None,
) -> pd.DataFrame:
    """Rank and cumulative exposure of every harsh event of one policy.

    Exposure accrues only while driving.  An event ``d`` seconds into a trip
    preceded by ``T`` hours of driving gets ``cum_time_t = T + d / 3600``.
    With ``trip_distances`` the exposure is kilometres instead, interpolated
    linearly inside each trip.  Events outside every trip are dropped and
    counted under ``"event_outside_trips"``.
    """
    starts = np.asarray(trip_starts, dtype=np.int64)
    ends = np.asarray(trip_ends, dtype=np.int64)
    order = np.argsort(starts, kind="stable")
    starts, ends = starts[order], ends[order]
    dur = (ends - starts).astype(float)
    if trip_distances is None:
        scale = np.full(len(dur), 1 / 3600.0)
    else:
        dist = np.asarray(trip_distances, dtype=float)[order]
        scale = np.divide(dist, dur, out=np.zeros_like(dist), where=dur > 0)
    before = np.concatenate([[0.0], np.cumsum(dur * scale)])[:-1]

    ts = np.asarray(event_ts, dtype=np.int64)
    kinds = np.asarray(event_kinds, dtype=np.int64)
    j = np.searchsorted(starts, ts, side="right") - 1
    inside = (j >= 0) & (ts <= ends[np.clip(j, 0, None)]) if len(starts) else np.zeros(len(ts), dtype=bool)
    if diagnostics is not None and (~inside).any():
        diagnostics["event_outside_trips"] += int((~inside).sum())
    ts, kinds, j = ts[inside], kinds[inside], j[inside]
    t = before[j] + (ts - starts[j]) * scale[j]
    types = np.array([EventType.from_kind(k).value for k in kinds], dtype=object)

    frame = pd.DataFrame({"policy_id": policy_id, "event_type": types, "cum_time_t": t, "_ts": ts})
    frame = frame.sort_values(["event_type", "_ts"], kind="stable")
    frame["rank_k"] = frame.groupby("event_type").cumcount() + 1
    frame["claim_group"] = claim_group
    frame["age_group"] = age_group
    return frame[ARRIVAL_COLUMNS].reset_index(drop=True)


def filter_min_occurrences(arrivals: pd.DataFrame, min_count: int = 5) -> pd.DataFrame:
    """Keep ranks reached by at least ``min_count`` distinct policies (per type)."""
    if min_count <= 1 or arrivals.empty:
        return arrivals
    reach = arrivals.groupby(["event_type", "rank_k"])["policy_id"].transform("nunique")
    return arrivals[reach >= min_count]


@dataclass
class PowerLawFit:
    alpha: float
    beta: float
    se_alpha: float
    se_beta: float
    n_points: int
    r_squared: float


@dataclass
class LearningCurvature:
    c: float
    p: float


def _xy(arrivals, t=None):
    if t is not None:
        k, t = np.asarray(arrivals, dtype=float), np.asarray(t, dtype=float)
    else:
        k, t = arrivals["rank_k"].to_numpy(dtype=float), arrivals["cum_time_t"].to_numpy(dtype=float)
    if len(k) < 3:
        raise InsufficientData(f"need at least 3 points, got {len(k)}")
    if np.any(t <= 0):
        raise ZeroTimeEvent("cumulative exposure must be positive")
    return np.log(t), np.log(k)


def _ols(X: np.ndarray, y: np.ndarray):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(len(y) - X.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.pinv(X.T @ X)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return coef, np.sqrt(np.diag(cov)), r2


def fit_loglog(arrivals, t=None) -> PowerLawFit:
    """OLS of ln(rank) on ln(cumulative exposure).

    Pass an arrivals frame, or ranks and times as two arrays.
    """
    x, y = _xy(arrivals, t)
    coef, se, r2 = _ols(np.column_stack([np.ones_like(x), x]), y)
    return PowerLawFit(float(coef[0]), float(coef[1]), float(se[0]), float(se[1]), len(y), r2)


def second_derivative_coeffs(fit: PowerLawFit) -> LearningCurvature:
    """f''(t) = c * t**p for f(t) = exp(alpha) * t**beta."""
    return LearningCurvature(c=math.exp(fit.alpha) * fit.beta * (fit.beta - 1.0), p=fit.beta - 2.0)


def fit_loglog_age(arrivals: pd.DataFrame) -> dict[str, PowerLawFit]:
    """Shared intercept with one ln-time slope per age group.

    Groups with fewer than three points are omitted from the result.
    """
    df = arrivals.dropna(subset=["age_group"])
    present = [g for g in AGE_GROUPS if (df["age_group"] == g).sum() >= 3]
    if not present:
        raise InsufficientData("no age group has three points")
    df = df[df["age_group"].isin(present)]
    x, y = _xy(df)
    g = df["age_group"].to_numpy()
    X = np.column_stack([np.ones_like(x)] + [x * (g == a) for a in present])
    coef, se, r2 = _ols(X, y)
    return {
        a: PowerLawFit(float(coef[0]), float(coef[i + 1]), float(se[0]), float(se[i + 1]),
                       int((g == a).sum()), r2)
        for i, a in enumerate(present)
    }


REPORT_COLUMNS = ["population", "subset", "age_group", "event_type", "alpha", "beta", "se_beta", "n_points",
                  "r_squared", "c", "p"]


def learning_report(arrivals: pd.DataFrame, min_count: int = 5) -> pd.DataFrame:
    """Table of fits by population (all, claimed, no claim), subset (all ranks
    or ranks reached by ``min_count`` policies) and event type, plus the
    age-interaction slopes."""
    rows = []
    populations = [("all", arrivals)]
    for grp in ("claimed", "no_claim"):
        populations.append((grp, arrivals[arrivals["claim_group"] == grp]))
    for pop, data in populations:
        for subset, d in (("all", data), (f"min{min_count}", filter_min_occurrences(data, min_count))):
            for et in EVENT_TYPES:
                part = d[d["event_type"] == et]
                try:
                    fits = {"all": fit_loglog(part)}
                except (InsufficientData, ZeroTimeEvent):
                    continue
                try:
                    fits.update(fit_loglog_age(part))
                except (InsufficientData, ZeroTimeEvent, KeyError):
                    pass
                for grp, f in fits.items():
                    cv = second_derivative_coeffs(f)
                    rows.append([pop, subset, grp, et, f.alpha, f.beta, f.se_beta, f.n_points, f.r_squared,
                                 cv.c, cv.p])
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)
