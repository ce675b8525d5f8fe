"""Log-link Poisson and NB2 count regressions fitted by iteratively reweighted
least squares, with offset or logged-covariate exposure, Wald inference and
AIC-based stepwise selection."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import special, stats

from .errors import (
    MissingColumn,
    NonPositiveExposure,
    NonPositiveMu,
    RankDeficient,
    UnknownCoefficient,
    UnknownLevel,
)
from .features import ROADTYPE_NAMES, SLOT_NAMES

log = logging.getLogger(__name__)

POISSON = "poisson"
NEGBIN = "negbin"
FAMILIES = (POISSON, NEGBIN)

TOL = 1e-8
MAX_SWEEPS = 100
MAX_THETA_STEPS = 50
THETA_CAP = 1e6
LL_FLAT = 1e-12
RANK_TOL = 1e-10

# compositional variables enter as blocks; the last component is the reference
BLOCKS: dict[str, tuple[str, ...]] = {
    "prop_time": SLOT_NAMES[:-1],
    "prop_roadtype": ROADTYPE_NAMES[:-1],
}

_TERM_RE = re.compile(r"^\s*(?:log\((?P<log>[A-Za-z_][\w.]*)\)|(?P<name>[A-Za-z_][\w.]*)(?:\[(?P<ref>[^\]]*)\])?)\s*$")


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class Term:
    """One votable covariate.

    ``kind`` is ``numeric``, ``log``, ``categorical`` or ``block``.  A
    categorical term with an empty ``reference`` uses its first sorted level.
    """

    kind: str
    column: str
    reference: str | None = None

    @property
    def label(self) -> str:
        if self.kind == "log":
            return f"log({self.column})"
        if self.kind == "categorical" and self.reference:
            return f"{self.column}[{self.reference}]"
        return self.column

    @property
    def name(self) -> str:
        """Name used in vote tables (the variable, not its encoding)."""
        return self.label if self.kind == "log" else self.column

    def columns(self) -> tuple[str, ...]:
        return BLOCKS[self.column] if self.kind == "block" else (self.column,)


def parse_term(text: str) -> Term:
    m = _TERM_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse model term {text!r}")
    if m.group("log"):
        return Term("log", m.group("log"))
    name = m.group("name")
    if m.group("ref") is not None:
        return Term("categorical", name, m.group("ref").strip() or None)
    if name in BLOCKS:
        return Term("block", name)
    return Term("numeric", name)


@dataclass(frozen=True)
class Exposure:
    """How exposure enters the linear predictor.

    ``offset``: ln(column) with coefficient fixed at 1.  ``covariate``:
    ln(column) as an ordinary regressor.  ``none``: no exposure term.
    """

    mode: str = "none"
    column: str | None = None

    def __post_init__(self):
        if self.mode not in ("none", "offset", "covariate"):
            raise ValueError(f"unknown exposure mode {self.mode!r}")
        if self.mode != "none" and not self.column:
            raise ValueError(f"exposure mode {self.mode!r} needs a column")

    @classmethod
    def parse(cls, text: str | None) -> Exposure:
        if not text or text.strip().lower() == "none":
            return cls()
        mode, _, column = text.partition(":")
        return cls(mode.strip().lower(), column.strip())

    @classmethod
    def policy_period(cls) -> Exposure:
        return cls("offset", "policy_period")

    def __str__(self) -> str:
        return "none" if self.mode == "none" else f"{self.mode}:{self.column}"


@dataclass(frozen=True)
class ModelSpec:
    response: str = "claim_count"
    terms: tuple[Term, ...] = ()
    exposure: Exposure = Exposure()
    family: str = NEGBIN

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicated model terms in {names}")

    @classmethod
    def from_strings(cls, terms: Sequence[str], exposure: str | None = None, family: str = NEGBIN,
                     response: str = "claim_count") -> ModelSpec:
        return cls(response, tuple(parse_term(t) for t in terms), Exposure.parse(exposure), family)

    def with_terms(self, terms: Sequence[Term]) -> ModelSpec:
        return ModelSpec(self.response, tuple(terms), self.exposure, self.family)

    def with_family(self, family: str) -> ModelSpec:
        return ModelSpec(self.response, self.terms, self.exposure, family)

    def to_dict(self) -> dict:
        return {
            "response": self.response,
            "terms": [t.label for t in self.terms],
            "exposure": str(self.exposure),
            "family": self.family,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelSpec:
        return cls.from_strings(d["terms"], d.get("exposure"), d.get("family", NEGBIN), d.get("response", "claim_count"))


# ---------------------------------------------------------------------------
# design matrices


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray | None
    offset: np.ndarray
    columns: list[str]
    term_columns: dict[str, list[int]]  # term name -> column indices in X
    levels: dict[str, list[str]]
    row_index: np.ndarray  # rows of the source table kept
    dropped: dict[str, int] = field(default_factory=dict)

    def subset(self, term_names: Sequence[str]) -> Design:
        """Design restricted to the intercept, exposure covariate and ``term_names``."""
        keep = [0] + self.term_columns.get("__exposure__", [])
        for name in term_names:
            keep.extend(self.term_columns[name])
        keep = sorted(set(keep))
        remap = {old: new for new, old in enumerate(keep)}
        tc = {n: [remap[i] for i in idx] for n, idx in self.term_columns.items() if all(i in remap for i in idx)}
        return Design(self.X[:, keep], self.y, self.offset, [self.columns[i] for i in keep], tc, self.levels,
                      self.row_index, self.dropped)


def _levels_of(series: pd.Series) -> list[str]:
    return sorted(series.dropna().astype(str).unique().tolist())


def _require(df: pd.DataFrame, column: str) -> None:
    if column not in df.columns:
        raise MissingColumn(column)


def build_design(
    df: pd.DataFrame,
    spec: ModelSpec,
    levels: Mapping[str, Sequence[str]] | None = None,
    *,
    require_response: bool = True,
    drop_nonpositive_exposure: bool = False,
) -> Design:
    """Intercept, encoded terms and exposure for ``spec`` over ``df``.

    Categorical terms use ``levels`` when supplied (so that test folds share
    the training encoding) and raise :class:`UnknownLevel` for anything else.
    Rows with missing values in used columns are dropped and counted.  Rows
    with non-positive exposure raise :class:`NonPositiveExposure` unless
    ``drop_nonpositive_exposure`` is set.
    """
    levels = {k: list(v) for k, v in (levels or {}).items()}
    used: list[str] = []
    for term in spec.terms:
        used.extend(term.columns())
    if spec.exposure.mode != "none":
        used.append(spec.exposure.column)
    if require_response:
        used.append(spec.response)
    for c in used:
        _require(df, c)

    dropped: dict[str, int] = {}
    mask = ~df[used].isna().any(axis=1).to_numpy() if used else np.ones(len(df), dtype=bool)
    if (~mask).any():
        dropped["missing"] = int((~mask).sum())
    if spec.exposure.mode != "none":
        expo = pd.to_numeric(df[spec.exposure.column], errors="coerce").to_numpy(dtype=float)
        bad = mask & ~(expo > 0)
        if bad.any():
            if not drop_nonpositive_exposure:
                raise NonPositiveExposure(
                    f"{int(bad.sum())} rows have non-positive {spec.exposure.column}"
                )
            dropped["nonpositive_exposure"] = int(bad.sum())
            mask &= ~bad
    rows = np.flatnonzero(mask)
    sub = df.iloc[rows]
    n = len(sub)

    cols: list[np.ndarray] = [np.ones(n)]
    names = ["intercept"]
    term_columns: dict[str, list[int]] = {}
    for term in spec.terms:
        start = len(names)
        if term.kind in ("numeric", "block"):
            for c in term.columns():
                cols.append(pd.to_numeric(sub[c]).to_numpy(dtype=float))
                names.append(c)
        elif term.kind == "log":
            v = pd.to_numeric(sub[term.column]).to_numpy(dtype=float)
            if (v <= 0).any():
                raise NonPositiveExposure(f"log({term.column}) needs positive values")
            cols.append(np.log(v))
            names.append(term.label)
        else:
            vals = sub[term.column].astype(str).to_numpy()
            lv = levels.get(term.column) or _levels_of(df[term.column])
            levels[term.column] = lv
            unknown = sorted(set(vals) - set(lv))
            if unknown:
                raise UnknownLevel(f"{term.column} has unknown levels {unknown}")
            ref = term.reference if term.reference is not None else lv[0]
            if ref not in lv:
                raise UnknownLevel(f"reference level {ref!r} not found for {term.column}")
            for level in lv:
                if level != ref:
                    cols.append((vals == level).astype(float))
                    names.append(f"{term.column}_{level}")
        term_columns[term.name] = list(range(start, len(names)))
    offset = np.zeros(n)
    if spec.exposure.mode != "none":
        lx = np.log(pd.to_numeric(sub[spec.exposure.column]).to_numpy(dtype=float))
        if spec.exposure.mode == "offset":
            offset = lx
        else:
            term_columns["__exposure__"] = [len(names)]
            cols.append(lx)
            names.append(f"log({spec.exposure.column})")
    y = None
    if require_response:
        y = pd.to_numeric(sub[spec.response]).to_numpy(dtype=float)
        if (y < 0).any() or not np.allclose(y, np.round(y)):
            raise ValueError(f"{spec.response} must hold non-negative integers")
    X = np.column_stack(cols) if n else np.zeros((0, len(names)))
    return Design(X, y, offset, names, term_columns, levels, rows, dropped)


# ---------------------------------------------------------------------------
# likelihoods


def poisson_loglik(y, mu) -> float:
    return float(np.sum(special.xlogy(y, mu) - mu - special.gammaln(y + 1)))


def nb_loglik(y, mu, theta: float) -> float:
    return float(np.sum(
        special.gammaln(y + theta) - special.gammaln(theta) - special.gammaln(y + 1)
        + theta * np.log(theta / (theta + mu)) + special.xlogy(y, mu / (theta + mu))
    ))


def nb_deviance(y, mu) -> float:
    """Deviance in the NB form with unit dispersion, summed over observations.

    The ``y ln(y/mu)`` term is taken as zero when ``y = 0``.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise NonPositiveMu("means must be positive")
    return float(2.0 * np.sum(special.xlogy(y, y / mu) + (1 + y) * np.log((1 + mu) / (1 + y))))


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FittedGLM:
    family: str
    coefficients: dict[str, float]
    std_errors: dict[str, float]
    log_likelihood: float
    converged: bool
    iterations: int
    n_obs: int
    theta: float | None = None
    no_overdispersion: bool = False
    ll_history: list[float] = field(default_factory=list)
    spec: ModelSpec | None = None
    levels: dict[str, list[str]] = field(default_factory=dict)
    dropped: dict[str, int] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.coefficients)

    @property
    def beta(self) -> np.ndarray:
        return np.fromiter(self.coefficients.values(), dtype=float)

    @property
    def n_params(self) -> int:
        return len(self.coefficients) + (1 if self.family == NEGBIN else 0)

    @property
    def aic(self) -> float:
        return -2.0 * self.log_likelihood + 2.0 * self.n_params

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict() if self.spec else None,
            "family": self.family,
            "coefficients": self.coefficients,
            "std_errors": self.std_errors,
            "theta": self.theta,
            "no_overdispersion": self.no_overdispersion,
            "log_likelihood": self.log_likelihood,
            "aic": self.aic,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_obs": self.n_obs,
            "ll_history": self.ll_history,
            "levels": self.levels,
            "dropped_rows": self.dropped,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> FittedGLM:
        return cls(
            family=d["family"],
            coefficients=dict(d["coefficients"]),
            std_errors=dict(d["std_errors"]),
            log_likelihood=d["log_likelihood"],
            converged=d["converged"],
            iterations=d["iterations"],
            n_obs=d["n_obs"],
            theta=d.get("theta"),
            no_overdispersion=d.get("no_overdispersion", False),
            ll_history=list(d.get("ll_history", [])),
            spec=ModelSpec.from_dict(d["spec"]) if d.get("spec") else None,
            levels={k: list(v) for k, v in d.get("levels", {}).items()},
            dropped=dict(d.get("dropped_rows", {})),
        )


def check_rank(X: np.ndarray, names: Sequence[str] | None = None) -> None:
    if X.shape[0] < X.shape[1]:
        raise RankDeficient(f"{X.shape[0]} rows cannot identify {X.shape[1]} coefficients")
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    rank = int(np.sum(d > RANK_TOL * d[0])) if d.size else 0
    if rank < X.shape[1]:
        bad = [names[i] if names else str(i) for i in piv[rank:]]
        raise RankDeficient(f"design is rank deficient; aliased columns: {bad}")


def _validate(X, y, offset):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(y) != len(X):
        raise ValueError("design and response lengths differ")
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    off = np.zeros(len(y)) if offset is None else np.asarray(offset, dtype=float)
    return X, y, off


def _wls(X, w, z) -> np.ndarray:
    Xw = X * w[:, None]
    return np.linalg.solve(X.T @ Xw, Xw.T @ z)


def _irls_step(X, y, offset, beta, ll_fn, weight_fn, ll_cur):
    """One Fisher-scoring step with step halving so the likelihood never drops."""
    eta = X @ beta + offset
    mu = np.exp(eta)
    w = weight_fn(mu)
    z = eta - offset + (y - mu) / mu
    target = _wls(X, w, z)
    step = target - beta
    for _ in range(40):
        cand = beta + step
        mu_c = np.exp(np.clip(X @ cand + offset, -700, 700))
        ll = ll_fn(mu_c)
        if np.isfinite(ll) and ll >= ll_cur - 1e-12 * abs(ll_cur):
            return cand, max(ll, ll_cur)
        step *= 0.5
    return beta, ll_cur


def _start_beta(X, y, offset) -> np.ndarray:
    beta = np.zeros(X.shape[1])
    rate = max(y.mean(), 1e-3) / np.mean(np.exp(offset))
    beta[0] = math.log(rate)
    # intercept-only start is safe when column 0 is the constant
    if not np.allclose(X[:, 0], 1.0):
        beta = _wls(X, np.ones(len(y)), np.log(y + 0.5) - offset)
    return beta


def _covariance(X, w) -> np.ndarray:
    return np.linalg.inv(X.T @ (X * w[:, None]))


def _names(X, names):
    return list(names) if names is not None else [f"x{i}" for i in range(X.shape[1])]


def fit_poisson(X, y, offset=None, *, names=None, max_iter: int = MAX_SWEEPS, tol: float = TOL) -> FittedGLM:
    """Poisson log-link regression by IRLS."""
    X, y, offset = _validate(X, y, offset)
    names = _names(X, names)
    check_rank(X, names)

    def ll_fn(mu):
        return poisson_loglik(y, mu)

    beta = _start_beta(X, y, offset)
    ll = ll_fn(np.exp(X @ beta + offset))
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new_beta, new_ll = _irls_step(X, y, offset, beta, ll_fn, lambda mu: mu, ll)
        dbeta = np.max(np.abs(new_beta - beta) / (np.abs(beta) + 1e-10 + tol))
        dll = abs(new_ll - ll) / (abs(ll) + 1e-10)
        beta, ll = new_beta, new_ll
        history.append(ll)
        if dll < tol and (dbeta < tol or dll == 0.0):
            converged = True
            break
    if not converged:
        log.warning("Poisson IRLS did not converge in %d iterations", max_iter)
    mu = np.exp(X @ beta + offset)
    se = np.sqrt(np.diag(_covariance(X, mu)))
    return FittedGLM(POISSON, dict(zip(names, beta.tolist())), dict(zip(names, se.tolist())), ll, converged, it,
                     len(y), ll_history=history)


def _theta_score(y, mu, theta):
    g = (special.digamma(y + theta) - special.digamma(theta) + math.log(theta) + 1
         - np.log(theta + mu) - (theta + y) / (theta + mu)).sum()
    h = (special.polygamma(1, y + theta) - special.polygamma(1, theta) + 1 / theta - 2 / (theta + mu)
         + (y + theta) / (theta + mu) ** 2).sum()
    return float(g), float(h)


def _update_theta(y, mu, theta, tol):
    """Newton iterations in log(theta) with halving; returns (theta, ll, lls)."""
    ll = nb_loglik(y, mu, theta)
    lls = []
    for _ in range(MAX_THETA_STEPS):
        g, h = _theta_score(y, mu, theta)
        g_phi = theta * g
        h_phi = theta * theta * h + theta * g
        step = -g_phi / h_phi if h_phi < 0 else math.copysign(1.0, g_phi)
        step = max(min(step, 5.0), -5.0)
        phi = math.log(theta)
        accepted = False
        for _ in range(40):
            cand = math.exp(phi + step)
            if cand > THETA_CAP * 10:
                cand = THETA_CAP * 10
            ll_c = nb_loglik(y, mu, cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        rel = abs(cand - theta) / theta
        theta, ll = cand, max(ll_c, ll)
        lls.append(ll)
        if rel < tol or theta >= THETA_CAP:
            break
    return theta, ll, lls


def fit_negbin(X, y, offset=None, *, names=None, max_iter: int = MAX_SWEEPS, tol: float = TOL) -> FittedGLM:
    """NB2 log-link regression (variance mu + mu^2/theta) by maximum likelihood.

    Coefficient IRLS sweeps at fixed theta alternate with Newton updates of
    log(theta).  Starts from the Poisson fit and a moment estimate of theta.
    If theta runs past ``THETA_CAP`` the data show no overdispersion and the
    Poisson fit is returned flagged as such.
    """
    X, y, offset = _validate(X, y, offset)
    names = _names(X, names)
    pois = fit_poisson(X, y, offset, names=names, max_iter=max_iter, tol=tol)
    beta = pois.beta
    mu = np.exp(X @ beta + offset)
    excess = float(np.sum((y - mu) ** 2 - mu))
    theta = float(np.sum(mu**2) / excess) if excess > 0 else THETA_CAP / 10
    theta = min(max(theta, 1e-4), THETA_CAP / 10)

    def weight_fn(m):
        return m / (1 + m / theta)

    ll = nb_loglik(y, mu, theta)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        old_beta, old_theta, old_ll = beta, theta, ll
        for _ in range(25):
            nb, nll = _irls_step(X, y, offset, beta, lambda m: nb_loglik(y, m, theta), weight_fn, ll)
            done = np.max(np.abs(nb - beta) / (np.abs(beta) + 1e-10 + tol)) < tol
            beta, ll = nb, nll
            history.append(ll)
            if done:
                break
        mu = np.exp(X @ beta + offset)
        theta, ll, lls = _update_theta(y, mu, theta, tol)
        history.extend(lls)
        if theta >= THETA_CAP:
            break
        dbeta = np.max(np.abs(beta - old_beta) / (np.abs(old_beta) + 1e-10 + tol))
        # a very flat profile in theta can leave theta jittering at rounding
        # level; a sweep that no longer moves the likelihood has converged
        flat = abs(ll - old_ll) <= LL_FLAT * abs(ll)
        if dbeta < tol and abs(theta - old_theta) / old_theta < tol or flat:
            converged = True
            break
    if theta >= THETA_CAP or _theta_score(y, mu, THETA_CAP)[0] > 0 and theta > THETA_CAP / 10:
        fit = FittedGLM(NEGBIN, pois.coefficients, pois.std_errors, pois.log_likelihood, pois.converged,
                        pois.iterations, len(y), theta=None, no_overdispersion=True, ll_history=pois.ll_history)
        log.info("theta diverged; no overdispersion, returning the Poisson-equivalent fit")
        return fit
    if not converged:
        log.warning("NB fit did not converge in %d sweeps", max_iter)
    se = np.sqrt(np.diag(_covariance(X, mu / (1 + mu / theta))))
    return FittedGLM(NEGBIN, dict(zip(names, beta.tolist())), dict(zip(names, se.tolist())), ll, converged, it,
                     len(y), theta=theta, ll_history=history)


def fit_design(design: Design, family: str = NEGBIN) -> FittedGLM:
    fitter = fit_negbin if family == NEGBIN else fit_poisson
    return fitter(design.X, design.y, design.offset, names=design.columns)


def fit_model(df: pd.DataFrame, spec: ModelSpec, levels=None, *, drop_nonpositive_exposure: bool = False) -> FittedGLM:
    design = build_design(df, spec, levels, drop_nonpositive_exposure=drop_nonpositive_exposure)
    fit = fit_design(design, spec.family)
    fit.spec = spec
    fit.levels = design.levels
    fit.dropped = design.dropped
    return fit


# ---------------------------------------------------------------------------
# prediction and inference


def _linear_predictor(model: FittedGLM, data) -> tuple[np.ndarray, bool]:
    if model.spec is None:
        raise ValueError("model has no spec attached; use predict_from_design")
    single = isinstance(data, (Mapping, pd.Series))
    df = pd.DataFrame([dict(data)]) if single else data
    design = build_design(df, model.spec, model.levels, require_response=False)
    if design.dropped:
        raise MissingColumn(f"rows with missing covariates: {design.dropped}")
    beta = np.array([model.coefficients[c] for c in design.columns])
    return design.X @ beta + design.offset, single


def predict_mean(model: FittedGLM, data):
    """exp(offset + x'beta) for one covariate row (mapping) or a DataFrame."""
    eta, single = _linear_predictor(model, data)
    mu = np.exp(eta)
    return float(mu[0]) if single else mu


@dataclass
class CountDistribution:
    probs: np.ndarray
    mean: float
    sd: float

    @property
    def k_max(self) -> int:
        return len(self.probs) - 1

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)


def default_k_max(mu, theta: float | None, floor: int = 50) -> int:
    """Truncation point covering mu + 20 sd and the 1 - 1e-8 quantile.

    The quantile matters for small theta, where the NB tail is too heavy
    for the 20 sd rule alone to hold 1 - 1e-6 of the mass.
    """
    mu = float(np.max(np.asarray(mu, dtype=float)))
    var = mu + (mu**2 / theta if theta else 0.0)
    if theta:
        q = stats.nbinom.ppf(1 - 1e-8, theta, theta / (theta + mu))
    else:
        q = stats.poisson.ppf(1 - 1e-8, mu)
    return int(max(floor, math.ceil(mu + 20 * math.sqrt(var)), q))


def pmf_matrix(mu, theta: float | None, k_max: int) -> np.ndarray:
    """P(Y_i = k) for k = 0..k_max, one row per mean, via log-space recurrence."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    k = np.arange(1, k_max + 1, dtype=float)
    logmu = np.log(mu)[:, None]
    if theta is None:
        steps = logmu - np.log(k)[None, :]
        log0 = -mu
    else:
        steps = np.log((k - 1 + theta) / k)[None, :] + (logmu - np.log(theta + mu)[:, None])
        log0 = -theta * np.log1p(mu / theta)
    logp = np.concatenate([log0[:, None], log0[:, None] + np.cumsum(steps, axis=1)], axis=1)
    return np.exp(logp)


def model_theta(model: FittedGLM) -> float | None:
    return model.theta if model.family == NEGBIN and not model.no_overdispersion else None


def count_pmf(model: FittedGLM | None, row=None, k_max: int | None = None, *, mu: float | None = None,
              theta: float | None = None) -> CountDistribution:
    """Predictive count distribution of one policy.

    Either pass a fitted model and a covariate row, or a mean ``mu`` directly
    (with ``theta`` for NB2, omitted for Poisson).
    """
    if model is not None:
        mu = predict_mean(model, row)
        theta = model_theta(model)
    if mu is None or mu <= 0:
        raise NonPositiveMu("mean must be positive")
    if k_max is None:
        k_max = default_k_max(mu, theta)
    probs = pmf_matrix(mu, theta, k_max)[0]
    sd = math.sqrt(mu + (mu * mu / theta if theta else 0.0))
    return CountDistribution(probs, float(mu), sd)


def wald_test(model_or_estimate, name=None, null: float = 0.0, *, se: float | None = None) -> tuple[float, float]:
    """z = (estimate - null) / se and its two-sided normal p-value.

    Pass a fitted model and a coefficient name, or a bare estimate with
    ``se=``.
    """
    if isinstance(model_or_estimate, FittedGLM):
        if name not in model_or_estimate.coefficients:
            raise UnknownCoefficient(name)
        est = model_or_estimate.coefficients[name]
        se = model_or_estimate.std_errors[name]
    else:
        est = float(model_or_estimate)
        if se is None:
            raise ValueError("standard error required")
    z = (est - null) / se
    return float(z), float(2 * stats.norm.sf(abs(z)))


# ---------------------------------------------------------------------------
# stepwise selection


@dataclass
class StepwiseResult:
    selected: list[str]
    aic: float
    history: list[tuple[str, str, float]]  # (move, term, aic after)


def stepwise_aic(
    df: pd.DataFrame,
    pool: ModelSpec,
    levels=None,
    *,
    design: Design | None = None,
) -> StepwiseResult:
    """Bidirectional stepwise selection by AIC starting from the full pool.

    Each round applies the single add or drop with the largest AIC decrease;
    ties go to the alphabetically first term.  Blocks and categorical
    variables move as whole terms.  Fits that fail are treated as no
    improvement.
    """
    if design is None:
        design = build_design(df, pool, levels, drop_nonpositive_exposure=True)
    all_terms = [t.name for t in pool.terms]
    cache: dict[frozenset, float] = {}

    def score(terms: frozenset) -> float:
        if terms not in cache:
            sub = design.subset(sorted(terms, key=all_terms.index))
            try:
                cache[terms] = fit_design(sub, pool.family).aic
            except (RankDeficient, np.linalg.LinAlgError, FloatingPointError) as exc:
                log.debug("stepwise candidate %s failed: %s", sorted(terms), exc)
                cache[terms] = math.inf
        return cache[terms]

    current = frozenset(all_terms)
    best = score(current)
    history: list[tuple[str, str, float]] = []
    while True:
        moves = []
        for t in sorted(all_terms):
            cand = current - {t} if t in current else current | {t}
            moves.append((score(cand), t, "drop" if t in current else "add", cand))
        if not moves:
            break
        aic, term, kind, cand = min(moves, key=lambda m: (m[0], m[1]))
        if not aic < best:
            break
        current, best = cand, aic
        history.append((kind, term, aic))
    return StepwiseResult([t for t in all_terms if t in current], best, history)
