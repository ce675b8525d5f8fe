"""Command-line driver.

    telematics-ubi [--config PATH] [--seed N] [--out DIR] [--threads N] COMMAND

COMMAND is one of simulate, ingest, features, fit, cv, learning, robustness.
Settings come from an INI file; flags override it.  Log verbosity is read
from the ``TELEMATICS_LOG_LEVEL`` environment variable.

Exit codes: 0 success, 1 data error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ConfigInvalid, DataError

log = logging.getLogger("telematics_ubi")

COMMANDS = ("simulate", "ingest", "features", "fit", "cv", "learning", "robustness")
LOG_ENV = "TELEMATICS_LOG_LEVEL"
THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
DEFAULT_MODELS = ("mod3s", "t_mod3s", "tm_mod1s", "tt_mod1s")

_SIM_SCALARS = {
    "n_policies": int, "seed": int, "start_year": int, "bin_width": int,
    "trips_per_day": float, "trips_per_day_shape": float, "trip_minutes_median": float,
    "trip_minutes_sigma": float, "harsh_multiplier_shape": float, "severe_rate": float,
    "severe_learning_beta": float, "claim_theta": float, "cancel_rate": float, "late_start_rate": float,
    "junk_trip_rate": float, "age_missing_rate": float,
}
_DEFECTS = ("out_of_order", "invalid_gps", "missing_keyoff")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    out_dir: Path = Path("out")
    raw_records: Path | None = None
    trip_list: Path | None = None
    policies: Path | None = None
    simulate: dict | None = None
    bin_width: int = 10
    n_components: int = 2
    timeslot_hours: int = 4
    models: tuple[str, ...] = DEFAULT_MODELS
    custom_models: dict[str, tuple[tuple[str, ...], str]] = field(default_factory=dict)
    fixed_terms: dict[str, tuple[str, ...]] = field(default_factory=dict)
    families: tuple[str, ...] = ("poisson", "negbin")
    max_level: int = 4
    cv_k: int = 5
    cv_seed: int = 0
    cv_tolerance: float = 0.05
    vote_threshold: int = 3
    learning_min_count: int = 5
    learning_measure: str = "time"
    robustness_widths: tuple[int, ...] = tuple(range(2, 31))
    robustness_models: tuple[str, ...] = ("tm_mod1s", "tt_mod1s")
    benchmark: str = "mod3s"

    def validate(self) -> None:
        has_paths = any(p is not None for p in (self.raw_records, self.trip_list, self.policies))
        if has_paths == (self.simulate is not None):
            raise ConfigError("configure exactly one of [input] paths or a [simulate] block")
        if has_paths and None in (self.raw_records, self.trip_list, self.policies):
            raise ConfigError("[input] needs raw_records, trip_list and policies")
        if not (isinstance(self.bin_width, int) and 2 <= self.bin_width <= 30):
            raise ConfigError(f"bin_width must be an integer in [2, 30], got {self.bin_width}")
        if any(not 2 <= h <= 30 for h in self.robustness_widths) or not self.robustness_widths:
            raise ConfigError("robustness widths must lie in [2, 30]")
        if self.cv_k < 2:
            raise ConfigError(f"cv k must be at least 2, got {self.cv_k}")
        if not 1 <= self.vote_threshold <= self.cv_k:
            raise ConfigError(f"vote threshold must lie in [1, {self.cv_k}]")
        if self.n_components < 1:
            raise ConfigError("n_components must be positive")
        if self.timeslot_hours != 4:
            raise ConfigError("only 4-hour timeslots are supported")
        if self.learning_measure not in ("time", "distance"):
            raise ConfigError("learning measure must be 'time' or 'distance'")
        for f in self.families:
            if f not in ("poisson", "negbin"):
                raise ConfigError(f"unknown family {f!r}")

    # input locations, simulated or given
    def input_path(self, which: str) -> Path:
        if self.simulate is not None:
            return self.out_dir / {"raw_records": "raw_records.csv", "trip_list": "trip_list.csv",
                                   "policies": "policies.csv"}[which]
        return getattr(self, which)

    def artifact(self, name: str) -> Path:
        return self.out_dir / name


def _split(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.replace("\n", ",").split(",") if s.strip())


def _widths(text: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in _split(text):
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _get(section, key, conv, default):
    if key not in section:
        return default
    try:
        return conv(section[key])
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from None


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    """Read an INI file into a :class:`PipelineConfig` (defaults if ``None``)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            cp.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
    cfg = PipelineConfig()
    base = Path(path).parent if path is not None else Path(".")

    def resolve(v: str) -> Path:
        q = Path(v).expanduser()
        return q if q.is_absolute() else base / q

    if cp.has_section("output"):
        cfg.out_dir = resolve(cp["output"].get("dir", "out"))
    if cp.has_section("input"):
        s = cp["input"]
        for key in ("raw_records", "trip_list", "policies"):
            if key in s:
                setattr(cfg, key, resolve(s[key]))
    if cp.has_section("simulate"):
        cfg.simulate = dict(cp["simulate"])
    if cp.has_section("features"):
        s = cp["features"]
        cfg.bin_width = _get(s, "bin_width", int, cfg.bin_width)
        cfg.n_components = _get(s, "n_components", int, cfg.n_components)
        cfg.timeslot_hours = _get(s, "timeslot_hours", int, cfg.timeslot_hours)
    if cp.has_section("models"):
        s = cp["models"]
        cfg.models = _get(s, "names", _split, cfg.models)
        cfg.families = _get(s, "families", _split, cfg.families)
        cfg.max_level = _get(s, "max_level", int, cfg.max_level)
        for key, val in s.items():
            if key.startswith("pool."):
                terms, _, exposure = val.partition("|")
                cfg.custom_models[key[5:]] = (_split(terms), exposure.strip() or "none")
            elif key.startswith("terms."):
                cfg.fixed_terms[key[6:]] = _split(val)
    if cp.has_section("cv"):
        s = cp["cv"]
        cfg.cv_k = _get(s, "k", int, cfg.cv_k)
        cfg.cv_seed = _get(s, "seed", int, cfg.cv_seed)
        cfg.cv_tolerance = _get(s, "tolerance", float, cfg.cv_tolerance)
        cfg.vote_threshold = _get(s, "threshold", int, cfg.vote_threshold)
    if cp.has_section("learning"):
        s = cp["learning"]
        cfg.learning_min_count = _get(s, "min_count", int, cfg.learning_min_count)
        cfg.learning_measure = s.get("measure", cfg.learning_measure).strip()
    if cp.has_section("robustness"):
        s = cp["robustness"]
        cfg.robustness_widths = _get(s, "widths", _widths, cfg.robustness_widths)
        cfg.robustness_models = _get(s, "models", _split, cfg.robustness_models)
        cfg.benchmark = s.get("benchmark", cfg.benchmark).strip()
    return cfg


def apply_flags(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    if args.out is not None:
        cfg.out_dir = Path(args.out)
    if args.seed is not None:
        cfg.cv_seed = args.seed
        if cfg.simulate is not None:
            cfg.simulate["seed"] = str(args.seed)
    return cfg


def sim_config(block: dict):
    from .simulate import SimConfig

    kw: dict = {}
    defects = {}
    for key, val in block.items():
        try:
            if key in _SIM_SCALARS:
                kw[key] = _SIM_SCALARS[key](val)
            elif key == "harsh_rates":
                kw[key] = tuple(float(v) for v in _split(val))
            elif key in _DEFECTS:
                defects[key] = float(val)
            else:
                raise ConfigError(f"[simulate] unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"[simulate] {key}: {exc}") from None
    cfg = SimConfig(**kw)
    cfg.defect_rates = {**cfg.defect_rates, **defects}
    return cfg


def model_specs(cfg: PipelineConfig, names) -> dict:
    from .pipeline import model_pool
    from .regress import ModelSpec

    out = {}
    for name in names:
        if name in cfg.custom_models:
            terms, exposure = cfg.custom_models[name]
            try:
                out[name] = ModelSpec.from_strings(terms, exposure)
            except ValueError as exc:
                raise ConfigError(f"model {name}: {exc}") from None
        else:
            out[name] = model_pool(name)
    return out


# ---------------------------------------------------------------------------
# shared loaders


def _need(path: Path, hint: str = "") -> Path:
    if not Path(path).is_file():
        raise DataError(f"missing input file{hint}", stage="input", location=str(path))
    return Path(path)


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _read_records(cfg: PipelineConfig, diagnostics=None):
    from .ingest import parse_raw_records, reorder_chronological

    path = _need(cfg.input_path("raw_records"))
    return reorder_chronological(parse_raw_records(path, diagnostics))


def _read_csv(path: Path, hint: str):
    import pandas as pd

    try:
        return pd.read_csv(_need(path, hint))
    except pd.errors.ParserError as exc:
        raise DataError(f"cannot parse: {exc}", stage="input", location=str(path)) from None


def _cleaned_tables(cfg: PipelineConfig):
    hint = " (run the ingest command first)"
    trips = _read_csv(cfg.artifact("trips.csv"), hint)
    policies = _read_csv(cfg.artifact("policies_retained.csv"), hint)
    return trips, policies


def _feature_table(cfg: PipelineConfig):
    return _read_csv(cfg.artifact("features.csv"), " (run the features command first)")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: PipelineConfig) -> str:
    from .ingest import write_raw_records, write_trip_list
    from .simulate import simulate_portfolio, write_ground_truth, write_policies

    if cfg.simulate is None:
        raise ConfigError("the simulate command needs a [simulate] block")
    sc = sim_config(cfg.simulate)
    port = simulate_portfolio(sc)
    write_raw_records(cfg.artifact("raw_records.csv"), port.records)
    write_trip_list(cfg.artifact("trip_list.csv"), port.trips)
    write_policies(cfg.artifact("policies.csv"), port.policies)
    write_ground_truth(cfg.artifact("ground_truth.json"), sc, port.truth)
    return (f"simulate: {sc.n_policies} policies, {len(port.records.speed)} records, "
            f"{len(port.trips)} trip-list rows -> {cfg.out_dir}")


def cmd_ingest(cfg: PipelineConfig) -> str:
    import pandas as pd

    from .ingest import ParseDiagnostics, parse_trip_list
    from .pipeline import clean_portfolio

    rec_diag, trip_diag = ParseDiagnostics(), ParseDiagnostics()
    records = _read_records(cfg, rec_diag)
    trip_path = _need(cfg.input_path("trip_list"))
    entries = parse_trip_list(trip_path, trip_diag)
    policies = pd.read_csv(_need(cfg.input_path("policies")))
    clean = clean_portfolio(records, entries, policies)
    if clean.policies.empty:
        raise DataError("no policy survived cleaning", stage="ingest", location=str(cfg.input_path("policies")))
    clean.trips_frame().to_csv(cfg.artifact("trips.csv"), index=False, float_format="%.10g")
    clean.policies.to_csv(cfg.artifact("policies_retained.csv"), index=False, float_format="%.10g")
    diag = dict(clean.diagnostics)
    diag["raw_records"] = rec_diag.to_dict()
    diag["trip_list"] = trip_diag.to_dict()
    _write_json(cfg.artifact("cleaning_diagnostics.json"), diag)
    return (f"ingest: {diag['trips_retained']} of {diag['trips_listed']} trips and "
            f"{diag['policies_retained']} of {diag['policies_listed']} policies retained")


def cmd_features(cfg: PipelineConfig) -> str:
    from .features import bin_config_for_width, matrices_to_json
    from .pipeline import feature_table, observations_from_trips, pc_scores, policy_order, transition_probs

    trips, policies = _cleaned_tables(cfg)
    records = _read_records(cfg)
    obs = observations_from_trips(records, trips)
    bins = bin_config_for_width(cfg.bin_width)
    _, probs, visited = transition_probs(obs, bins)
    scores, pca = pc_scores(probs, cfg.n_components)
    table = feature_table(trips, policies, scores)
    table.to_csv(cfg.artifact("features.csv"), index=False, float_format="%.10g")
    with open(cfg.artifact("transition_matrices.json"), "w", encoding="utf-8") as fh:
        json.dump(matrices_to_json(bins, policy_order(trips), probs, visited), fh)
    _write_json(cfg.artifact("pca_model.json"), {"bin_width": cfg.bin_width, **pca.to_dict(scores.shape[1])})
    ratio = pca.explained_variance_ratio()[: scores.shape[1]].sum()
    return f"features: {len(table)} policies, {bins.m}x{bins.m} matrices, {scores.shape[1]} PCs explain {ratio:.1%}"


def _complete_rows(df, spec):
    cols = [spec.response] + [c for t in spec.terms for c in t.columns()]
    if spec.exposure.mode != "none":
        cols.append(spec.exposure.column)
    return df.dropna(subset=[c for c in cols if c in df.columns])


def cmd_fit(cfg: PipelineConfig) -> str:
    import pandas as pd

    from .evaluate import category_levels, chi_square_stat, predicted_count_distribution
    from .regress import Exposure, fit_model, parse_term, stepwise_aic, wald_test

    table = _feature_table(cfg)
    report, frames = {}, []
    for name, pool in model_specs(cfg, cfg.models).items():
        levels = category_levels(table, pool)
        if name in cfg.fixed_terms:
            chosen = {parse_term(t).name for t in cfg.fixed_terms[name]}
            selection = "fixed"
        else:
            chosen = set(stepwise_aic(table, pool, levels).selected)
            selection = "stepwise_aic"
        spec = pool.with_terms([t for t in pool.terms if t.name in chosen])
        variants = [("configured", spec)]
        if spec.exposure.mode == "covariate":
            variants.append(("offset", type(spec)(spec.response, spec.terms,
                                                  Exposure("offset", spec.exposure.column), spec.family)))
        entry = {"selection": selection, "fits": {}}
        for variant, vspec in variants:
            for family in cfg.families:
                s = vspec.with_family(family)
                data = _complete_rows(table, s)
                if s.exposure.mode != "none":
                    data = data[data[s.exposure.column] > 0]
                model = fit_model(data, s, levels)
                dist = predicted_count_distribution(model, data, cfg.max_level)
                fit_d = model.to_dict()
                fit_d["aic"] = model.aic
                fit_d["chi_square"] = chi_square_stat(dist.observed, dist.expected).statistic
                fit_d["prediction_distribution"] = dist.to_dict()
                exp_name = f"log({s.exposure.column})"
                if s.exposure.mode == "covariate" and exp_name in model.coefficients:
                    z, p = wald_test(model, exp_name, 1.0)
                    fit_d["exposure_wald"] = {"coefficient": exp_name, "null": 1.0, "z": z, "p_value": p}
                entry["fits"][f"{variant}/{family}"] = fit_d
                f = dist.to_frame()
                f.insert(0, "family", family)
                f.insert(0, "exposure", s.exposure.mode)
                f.insert(0, "model", name)
                frames.append(f)
        report[name] = entry
    _write_json(cfg.artifact("fitted_models.json"), report)
    pd.concat(frames, ignore_index=True).to_csv(cfg.artifact("prediction_distribution.csv"), index=False,
                                                float_format="%.6f")
    return f"fit: {len(report)} models fitted on {len(table)} policies"


def _claim_group_tests(table) -> dict:
    from .errors import DegenerateSample
    from .evaluate import welch_t_test

    claimed = table["claim_count"] > 0
    out = {}
    for col in ("total_distance", "total_time", "avg_speed", "max_speed", "num_acc", "num_brake", "num_left",
                "num_right", "num_severe", "pc1", "pc2"):
        if col not in table.columns:
            continue
        a, b = table.loc[claimed, col].dropna(), table.loc[~claimed, col].dropna()
        try:
            t, p = welch_t_test(a, b)
        except DegenerateSample:
            continue
        out[col] = {"mean_claimed": round(float(a.mean()), 10), "mean_no_claim": round(float(b.mean()), 10),
                    "t": round(t, 10), "p_value": round(p, 12)}
    return out


def cmd_cv(cfg: PipelineConfig) -> str:
    from .evaluate import kfold_partition, majority_vote_select

    table = _feature_table(cfg)
    plan = kfold_partition(table["claim_count"].to_numpy(), cfg.cv_k, cfg.cv_seed, cfg.cv_tolerance)
    models = {}
    for name, pool in model_specs(cfg, cfg.models).items():
        ledger, metrics, final = majority_vote_select(table, pool, plan, cfg.vote_threshold)
        models[name] = {"pool": pool.to_dict(), "votes": ledger.to_dict(), "final_spec": final.to_dict(),
                        **metrics.to_dict()}
    report = {"split": "kfold", "fold_plan": plan.to_dict(), "models": models,
              "claim_group_tests": _claim_group_tests(table)}
    _write_json(cfg.artifact("cv_report.json"), report)
    best = min(models, key=lambda n: models[n]["metrics"]["deviance"])
    return f"cv: {len(models)} models, {cfg.cv_k} folds; lowest deviance {best}"


def cmd_learning(cfg: PipelineConfig) -> str:
    from .learning import learning_report
    from .pipeline import arrival_table

    trips, policies = _cleaned_tables(cfg)
    records = _read_records(cfg)
    arrivals, diag = arrival_table(records, trips, policies, measure=cfg.learning_measure)
    arrivals.to_csv(cfg.artifact("learning_arrivals.csv"), index=False, float_format="%.10g")
    report = learning_report(arrivals, cfg.learning_min_count)
    report.to_csv(cfg.artifact("learning_report.csv"), index=False, float_format="%.10g")
    return f"learning: {len(arrivals)} events, {len(report)} fitted rows"


def cmd_robustness(cfg: PipelineConfig) -> str:
    from .evaluate import kfold_partition
    from .pipeline import feature_table, observations_from_trips, robustness_sweep

    trips, policies = _cleaned_tables(cfg)
    records = _read_records(cfg)
    obs = observations_from_trips(records, trips)
    base = feature_table(trips, policies)
    plan = kfold_partition(base["claim_count"].to_numpy(), cfg.cv_k, cfg.cv_seed, cfg.cv_tolerance)
    pools = model_specs(cfg, cfg.robustness_models)
    bench = model_specs(cfg, [cfg.benchmark])
    table = robustness_sweep(obs, base, {**pools, **bench}, plan, widths=cfg.robustness_widths,
                             base_width=cfg.bin_width, n_components=cfg.n_components,
                             threshold=cfg.vote_threshold, benchmark=cfg.benchmark)
    table.to_csv(cfg.artifact("robustness.csv"), index=False, float_format="%.10g")
    return f"robustness: {len(table)} bin widths x {len(pools)} models against {cfg.benchmark}"


HANDLERS = {
    "simulate": cmd_simulate, "ingest": cmd_ingest, "features": cmd_features, "fit": cmd_fit, "cv": cmd_cv,
    "learning": cmd_learning, "robustness": cmd_robustness,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="telematics-ubi", description="Telematics claim-frequency pipeline.")
    p.add_argument("--config", metavar="PATH", help="INI configuration file")
    p.add_argument("--seed", type=int, metavar="N", help="seed for simulation and fold assignment")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
    p.add_argument("--threads", type=int, metavar="N", help="maximum BLAS threads")
    p.add_argument("command", choices=COMMANDS)
    return p


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return 2
        for var in THREAD_ENV:
            os.environ[var] = str(args.threads)
    _setup_logging()
    try:
        cfg = apply_flags(load_config(args.config), args)
        cfg.validate()
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        print(HANDLERS[args.command](cfg))
        return 0
    except (ConfigError, ConfigInvalid) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
