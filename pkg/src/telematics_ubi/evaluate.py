"""Cross-validation, majority-vote selection and model-quality metrics."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DegenerateSample, DegenerateSd, EmptyInput
from .regress import (
    CountDistribution,
    FittedGLM,
    ModelSpec,
    build_design,
    default_k_max,
    fit_model,
    model_theta,
    nb_deviance,
    pmf_matrix,
    predict_mean,
    stepwise_aic,
)

log = logging.getLogger(__name__)

METRICS = ("deviance", "rmse", "mae", "qs", "sphs", "rps", "dss", "chi_square")
TAIL_EPS = 1e-12


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray
    fold_means: np.ndarray
    seed: int
    tolerance: float = 0.05
    balanced: bool = True
    attempts: int = 1

    @property
    def spread(self) -> float:
        return float(self.fold_means.max() - self.fold_means.min())

    def folds(self):
        """Yield ``(fold, train_index, test_index)``."""
        for f in range(self.k):
            yield f, np.flatnonzero(self.assignments != f), np.flatnonzero(self.assignments == f)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "balanced": self.balanced,
            "attempts": self.attempts,
            "fold_means": [round(float(m), 6) for m in self.fold_means],
            "fold_sizes": np.bincount(self.assignments, minlength=self.k).tolist(),
        }


def _fold_means(y: np.ndarray, a: np.ndarray, k: int) -> np.ndarray:
    sizes = np.bincount(a, minlength=k)
    sums = np.bincount(a, weights=y, minlength=k)
    return np.divide(sums, sizes, out=np.zeros(k), where=sizes > 0)


def _rebalance(y: np.ndarray, a: np.ndarray, k: int, rng, max_swaps: int = 1000) -> None:
    """Swap single policies between the highest- and lowest-mean folds while
    that narrows the spread; fold sizes are unchanged."""
    sizes = np.bincount(a, minlength=k).astype(float)
    for _ in range(max_swaps):
        means = _fold_means(y, a, k)
        hi, lo = int(np.argmax(means)), int(np.argmin(means))
        spread = means[hi] - means[lo]
        if spread <= 0:
            return
        va = np.unique(y[a == hi])
        vb = np.unique(y[a == lo])
        delta = va[:, None] - vb[None, :]
        gap = np.abs(means[hi] - delta / sizes[hi] - means[lo] - delta / sizes[lo])
        gap[delta <= 0] = np.inf
        i, j = np.unravel_index(np.argmin(gap), gap.shape)
        if not np.isfinite(gap[i, j]):
            return
        new = means.copy()
        new[hi] -= delta[i, j] / sizes[hi]
        new[lo] += delta[i, j] / sizes[lo]
        if new.max() - new.min() >= spread - 1e-12:
            return
        a[rng.choice(np.flatnonzero((a == hi) & (y == va[i])))] = lo
        a[rng.choice(np.flatnonzero((a == lo) & (y == vb[j])))] = hi


def kfold_partition(claims, k: int = 5, seed: int = 0, tolerance: float = 0.05, max_attempts: int = 100) -> FoldPlan:
    """Stratified k-fold split with balanced mean claim counts.

    Policies are grouped by claim count, shuffled inside each group and
    dealt to folds in rounds of ``k``, largest counts first.  Each round gives
    one policy to every fold, the larger claim counts going to the folds
    with the smaller running totals, so fold sizes differ by at most one and
    the heavy tail does not pile up in one fold.  Single-policy swaps then
    narrow whatever spread an outlier leaves.  Attempts are re-drawn
    until the spread of fold means is within ``tolerance``; the best attempt
    is returned (flagged unbalanced) if none qualifies.
    """
    y = np.asarray(claims, dtype=float)
    n = len(y)
    if not 2 <= k <= n:
        raise ValueError(f"k must lie in [2, {n}], got {k}")
    rng = np.random.default_rng(seed)
    best = None
    for attempt in range(1, max_attempts + 1):
        perm = rng.permutation(n)
        order = perm[np.argsort(-y[perm], kind="stable")]
        a = np.empty(n, dtype=np.int64)
        sums = np.zeros(k)
        for lo in range(0, n, k):
            block = order[lo:lo + k]
            # random tie-break among equal totals, then smallest total first
            folds = np.lexsort((rng.random(k), sums))[:len(block)]
            a[block] = folds
            sums[folds] += y[block]
        _rebalance(y, a, k, rng)
        means = _fold_means(y, a, k)
        spread = means.max() - means.min()
        if best is None or spread < best[0]:
            best = (spread, a, means, attempt)
        if spread <= tolerance:
            break
    spread, a, means, attempt = best
    plan = FoldPlan(k, a, means, seed, tolerance, bool(spread <= tolerance), attempt)
    if not plan.balanced:
        log.warning("fold balance %.4f exceeds tolerance %.4f", spread, tolerance)
    return plan


def train_test_split(claims, test_fraction: float = 0.2, seed: int = 0, tolerance: float = 0.05):
    """Balanced hold-out split; returns ``(train_index, test_index)``."""
    k = max(2, int(round(1 / test_fraction)))
    plan = kfold_partition(claims, k, seed, tolerance)
    return np.flatnonzero(plan.assignments != 0), np.flatnonzero(plan.assignments == 0)


# ---------------------------------------------------------------------------
# point metrics


def _pair(y, yhat):
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.size == 0:
        raise EmptyInput("no observations")
    if y.shape != yhat.shape:
        raise ValueError("observations and predictions differ in length")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


# ---------------------------------------------------------------------------
# scoring rules


def _p_at(P: CountDistribution, x: int) -> float:
    return float(P.probs[x]) if 0 <= x < len(P.probs) else 0.0


def score_qs(P: CountDistribution, x: int) -> float:
    return -2.0 * _p_at(P, x) + float(np.sum(P.probs**2))


def score_sphs(P: CountDistribution, x: int) -> float:
    return -_p_at(P, x) / math.sqrt(float(np.sum(P.probs**2)))


def score_rps(P: CountDistribution, x: int) -> float:
    cdf = np.cumsum(P.probs)
    k = np.arange(len(cdf))
    terms = (cdf - (x <= k)) ** 2
    # beyond the support of P the indicator is 1 and the cdf is ~1
    return float(np.sum(terms))


def score_dss(P: CountDistribution, x: int) -> float:
    if not P.sd > 0:
        raise DegenerateSd("Dawid-Sebastiani score needs a positive sd")
    return float(((x - P.mean) / P.sd) ** 2 + 2 * math.log(P.sd))


def batch_scores(y, mu, theta: float | None, k_max: int | None = None) -> dict[str, np.ndarray]:
    """All four scoring rules for many NB2 (or Poisson, ``theta=None``) forecasts."""
    y = np.asarray(y, dtype=np.int64)
    mu = np.asarray(mu, dtype=float)
    if y.size == 0:
        raise EmptyInput("no observations")
    if k_max is None:
        k_max = max(default_k_max(mu, theta), int(y.max()))
    P = pmf_matrix(mu, theta, k_max)
    rows = np.arange(len(y))
    px = P[rows, y]
    norm2 = np.sum(P**2, axis=1)
    cdf = np.cumsum(P, axis=1)
    ind = y[:, None] <= np.arange(k_max + 1)[None, :]
    var = mu + (mu**2 / theta if theta else 0.0)
    sd = np.sqrt(var)
    return {
        "qs": -2 * px + norm2,
        "sphs": -px / np.sqrt(norm2),
        "rps": np.sum((cdf - ind) ** 2, axis=1),
        "dss": ((y - mu) / sd) ** 2 + 2 * np.log(sd),
    }


# ---------------------------------------------------------------------------
# chi-square and prediction distributions


def observed_level_counts(y, m: int) -> np.ndarray:
    """Counts of claim levels 0..m with the last level aggregating the tail."""
    y = np.minimum(np.asarray(y, dtype=np.int64), m)
    return np.bincount(y, minlength=m + 1).astype(float)


def expected_level_counts(mu, theta: float | None, m: int) -> np.ndarray:
    """E_g = sum_i P(Y_i = g) for g < m, and the tail mass for g = m."""
    mu = np.asarray(mu, dtype=float)
    P = pmf_matrix(mu, theta, m)
    out = P.sum(axis=0)
    out[m] = len(mu) - out[:m].sum()
    return out


@dataclass
class ChiSquare:
    statistic: float
    observed: np.ndarray
    expected: np.ndarray
    groups: list[list[int]]
    merged: int = 0


def chi_square_stat(observed, expected, *, bins: Sequence[Sequence[int]] | None = None,
                    min_expected: float = 0.5) -> ChiSquare:
    """Pearson statistic over claim levels.

    ``bins`` optionally groups levels explicitly (e.g. ``[[0], [1], [2], [3],
    [4, 5, 6]]``).  Groups whose expected count stays below ``min_expected``
    are then merged into the next group (the last one into its predecessor).
    """
    O = np.asarray(observed, dtype=float)
    E = np.asarray(expected, dtype=float)
    if O.shape != E.shape or O.size == 0:
        raise EmptyInput("observed and expected must be equal-length and non-empty")
    groups = [list(g) for g in bins] if bins is not None else [[g] for g in range(len(O))]
    merged = 0
    i = 0
    while len(groups) > 1 and i < len(groups):
        if E[groups[i]].sum() < min_expected:
            j = i + 1 if i + 1 < len(groups) else i - 1
            groups[j] = sorted(groups[j] + groups[i])
            del groups[i]
            merged += 1
            i = max(0, min(i, j))
            continue
        i += 1
    o = np.array([O[g].sum() for g in groups])
    e = np.array([E[g].sum() for g in groups])
    stat = float(np.sum(np.divide((o - e) ** 2, e, out=np.zeros_like(e), where=e > 0)))
    return ChiSquare(stat, o, e, groups, merged)


def format_relative_error(rel: float) -> str:
    return f"({100 * rel:+.2f}%)"


@dataclass
class PredictionDistribution:
    levels: list[int]
    observed: np.ndarray
    expected: np.ndarray
    total_observed: float
    total_expected: float

    @property
    def relative_error(self) -> float:
        return self.total_expected / self.total_observed - 1.0

    def to_frame(self) -> pd.DataFrame:
        labels = [str(g) for g in self.levels[:-1]] + [f"{self.levels[-1]}+"]
        return pd.DataFrame({"claim_count": labels, "observed": self.observed, "expected": self.expected})

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "observed": self.observed.tolist(),
            "expected": [round(float(e), 6) for e in self.expected],
            "total_observed": self.total_observed,
            "total_expected": round(self.total_expected, 6),
            "relative_error": format_relative_error(self.relative_error),
        }


def predicted_count_distribution(model: FittedGLM, data: pd.DataFrame, m: int | None = None) -> PredictionDistribution:
    mu = predict_mean(model, data)
    y = data.loc[:, model.spec.response].to_numpy(dtype=float)
    if m is None:
        m = int(y.max()) if len(y) else 0
    return PredictionDistribution(
        levels=list(range(m + 1)),
        observed=observed_level_counts(y, m),
        expected=expected_level_counts(mu, model_theta(model), m),
        total_observed=float(y.sum()),
        total_expected=float(mu.sum()),
    )


# ---------------------------------------------------------------------------
# two-sample tests


def welch_t_test(a, b) -> tuple[float, float]:
    """Welch statistic with Satterthwaite degrees of freedom, two-sided p."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise DegenerateSample("each sample needs at least two values")
    if np.var(a) == 0 and np.var(b) == 0:
        raise DegenerateSample("both samples have zero variance")
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# per-fold evaluation


@dataclass
class MetricsReport:
    per_fold: list[dict[str, float]]

    @property
    def averages(self) -> dict[str, float]:
        return {m: float(np.mean([f[m] for f in self.per_fold])) for m in METRICS}

    def __getattr__(self, name):
        if name in METRICS:
            return self.averages[name]
        raise AttributeError(name)

    def to_dict(self) -> dict:
        return {
            "metrics": {k: round(v, 10) for k, v in self.averages.items()},
            "per_fold": [{k: round(v, 10) for k, v in f.items()} for f in self.per_fold],
        }


def evaluate_predictions(y, mu, theta: float | None) -> dict[str, float]:
    """Test-set metrics; deviance is the per-observation mean."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sc = batch_scores(y.astype(np.int64), mu, theta)
    m = int(y.max()) if y.size else 0
    chi = chi_square_stat(observed_level_counts(y, m), expected_level_counts(mu, theta, m))
    out = {
        "deviance": nb_deviance(y, mu) / len(y),
        "rmse": rmse(y, mu),
        "mae": mae(y, mu),
        "chi_square": chi.statistic,
    }
    out.update({k: float(v.mean()) for k, v in sc.items()})
    return {k: out[k] for k in METRICS}


def evaluate_model(train: pd.DataFrame, test: pd.DataFrame, spec: ModelSpec, levels=None) -> tuple[FittedGLM, dict]:
    model = fit_model(train, spec, levels, drop_nonpositive_exposure=True)
    d = build_design(test, spec, model.levels, drop_nonpositive_exposure=True)
    beta = np.array([model.coefficients[c] for c in d.columns])
    mu = np.exp(d.X @ beta + d.offset)
    return model, evaluate_predictions(d.y, mu, model_theta(model))


def cross_validate(df: pd.DataFrame, spec: ModelSpec, plan: FoldPlan, levels=None) -> MetricsReport:
    levels = levels if levels is not None else category_levels(df, spec)
    per_fold = []
    for f, tr, te in plan.folds():
        _, metrics = evaluate_model(df.iloc[tr], df.iloc[te], spec, levels)
        per_fold.append(metrics)
    return MetricsReport(per_fold)


def category_levels(df: pd.DataFrame, spec: ModelSpec) -> dict[str, list[str]]:
    out = {}
    for t in spec.terms:
        if t.kind == "categorical":
            out[t.column] = sorted(df[t.column].dropna().astype(str).unique().tolist())
    return out


# ---------------------------------------------------------------------------
# majority voting


@dataclass
class VoteLedger:
    votes: dict[str, int]
    threshold: int = 3
    fold_selections: list[list[str]] = field(default_factory=list)

    @property
    def final_terms(self) -> list[str]:
        return [t for t, v in self.votes.items() if v >= self.threshold]

    @classmethod
    def tally(cls, pool: Sequence[str], selections: Sequence[Sequence[str]], threshold: int = 3) -> VoteLedger:
        c = Counter(t for sel in selections for t in set(sel))
        return cls({t: int(c.get(t, 0)) for t in pool}, threshold, [list(s) for s in selections])

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "votes": self.votes,
            "final_terms": self.final_terms,
            "fold_selections": self.fold_selections,
        }


Selector = Callable[[pd.DataFrame, ModelSpec, Mapping], Sequence[str]]


def _stepwise_selector(train: pd.DataFrame, pool: ModelSpec, levels: Mapping) -> list[str]:
    return stepwise_aic(train, pool, levels).selected


def majority_vote_select(
    df: pd.DataFrame,
    pool: ModelSpec,
    plan: FoldPlan,
    threshold: int = 3,
    *,
    selector: Selector | None = None,
) -> tuple[VoteLedger, MetricsReport, ModelSpec]:
    """Stepwise selection on every training fold, then a majority vote.

    Terms chosen in at least ``threshold`` folds form the final model, which
    is refit on each training fold and scored on its test fold.
    """
    selector = selector or _stepwise_selector
    levels = category_levels(df, pool)
    selections = []
    for f, tr, _ in plan.folds():
        try:
            selections.append(list(selector(df.iloc[tr], pool, levels)))
        except Exception as exc:
            raise RuntimeError(f"selection failed on fold {f}: {exc}") from exc
    ledger = VoteLedger.tally([t.name for t in pool.terms], selections, threshold)
    final = pool.with_terms([t for t in pool.terms if t.name in ledger.final_terms])
    per_fold = []
    for f, tr, te in plan.folds():
        try:
            per_fold.append(evaluate_model(df.iloc[tr], df.iloc[te], final, levels)[1])
        except Exception as exc:
            raise RuntimeError(f"evaluation failed on fold {f}: {exc}") from exc
    return ledger, MetricsReport(per_fold), final
