"""Monte Carlo benchmark harness.

Runs replications over the scenario grid, applies every requested
(method x learner x estimator x estimand) combination, aggregates the
performance metrics, and emits result files. Failed combinations are recorded
with a reason code; a run never aborts on a solver failure.
"""

from __future__ import annotations

import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EstimationError, GenerationError, NumericError
from .estimators import ResponseSurfaces, augmented_weighted_average, weighted_average, weighted_ols
from .learners import fit_learner
from .scenarios import (
    CONFOUNDING_LEVELS,
    HYPER_STREAM,
    RARITY_LEVELS,
    ScenarioSpec,
    build_scenario,
    crude_estimate,
    generate_dataset,
    grid_scenarios,
    replication_rng,
)
from .weights import (
    ESTIMANDS,
    METHODS,
    POSTPROCS,
    cached_tlf_hyper,
    energy_balance,
    iptw_weights,
    kom_weights,
    tlf_weights,
    weights_to_csv,
)

CANONICAL_LEARNERS = ("oracle", "logistic_well", "logistic_mis")
CANONICAL_ESTIMATORS = ("WA", "AWA", "OLS")

SUMMARY_HEADER = (
    "scenario_n,rarity,confounding,estimator,method,learner,estimand,"
    "valid_pct,bias,mae,spread_rmse,var,rmse_truth,coverage"
)

WORKERS_ENV_VAR = "BALANCEBENCH_WORKERS"

_ACCEPTED_SOLVER_STATUSES = {"optimal", "closed_form", "degenerate_uniform", "converged", "max_iter_tlf"}


def _canonical_subset(requested, canonical, what) -> tuple:
    requested = tuple(requested)
    unknown = [r for r in requested if r not in canonical]
    if unknown:
        raise ConfigError(f"unknown {what}: {', '.join(map(str, unknown))}")
    if not requested:
        raise ConfigError(f"at least one {what.rstrip('s')} must be selected")
    return tuple(c for c in canonical if c in requested)


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; selections are normalized into canonical order."""

    scenarios: tuple
    replications: int = 5000
    methods: tuple = METHODS
    learners: tuple = CANONICAL_LEARNERS
    estimators: tuple = CANONICAL_ESTIMATORS
    estimands: tuple = ESTIMANDS
    iptw_postproc: str = "trim99"
    master_seed: int = 0
    workers: int = 1
    output_path: str | None = None
    emit_raw: bool = False
    crude: bool = False
    dump_weights: bool = False

    def __post_init__(self):
        scenarios = []
        for item in self.scenarios:
            n, rarity, confounding = item
            if rarity not in RARITY_LEVELS or confounding not in CONFOUNDING_LEVELS:
                raise ConfigError(f"unknown scenario labels in {item!r}")
            scenarios.append((int(n), rarity, confounding))
        if not scenarios:
            raise ConfigError("at least one scenario must be selected")
        object.__setattr__(self, "scenarios", tuple(scenarios))
        object.__setattr__(self, "methods", _canonical_subset(self.methods, METHODS, "methods"))
        object.__setattr__(self, "learners", _canonical_subset(self.learners, CANONICAL_LEARNERS, "learners"))
        object.__setattr__(
            self, "estimators", _canonical_subset(self.estimators, CANONICAL_ESTIMATORS, "estimators")
        )
        object.__setattr__(self, "estimands", _canonical_subset(self.estimands, ESTIMANDS, "estimands"))
        if self.iptw_postproc not in POSTPROCS:
            raise ConfigError(f"unknown postproc {self.iptw_postproc!r}")
        if int(self.replications) < 1:
            raise ConfigError("replications must be >= 1")
        object.__setattr__(self, "replications", int(self.replications))
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "workers", max(1, int(self.workers)))

    def cells(self) -> list[tuple[str, str | None]]:
        """(method, learner) pairs: IPTW crosses with learners, the rest carry none."""
        out: list[tuple[str, str | None]] = []
        for method in self.methods:
            if method == "iptw":
                out.extend((method, learner) for learner in self.learners)
            else:
                out.append((method, None))
        return out


@dataclass
class ReplicationRecord:
    scenario_n: int
    rarity: str
    confounding: str
    replication: int
    method: str
    learner: str
    estimator: str
    estimand: str
    value: float
    se: float | None
    ci_lo: float | None
    ci_hi: float | None
    valid: bool
    reason: str
    diagnostics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def cell_key(self):
        return (
            self.scenario_n,
            self.rarity,
            self.confounding,
            self.estimator,
            self.method,
            self.learner,
            self.estimand,
        )


@dataclass
class MetricsSummary:
    scenario_n: int
    rarity: str
    confounding: str
    estimator: str
    method: str
    learner: str
    estimand: str
    count: int
    valid_pct: float
    bias: float | None
    mae: float | None
    spread_rmse: float | None
    var: float | None
    rmse_truth: float | None
    coverage: float | None


def _sort_key(position_of):
    def key(record_or_summary):
        r = record_or_summary
        return (
            r.scenario_n,
            RARITY_LEVELS.index(r.rarity),
            CONFOUNDING_LEVELS.index(r.confounding),
            getattr(r, "replication", 0),
            position_of("estimator", r.estimator),
            position_of("method", r.method),
            position_of("learner", r.learner),
            ESTIMANDS.index(r.estimand) if r.estimand in ESTIMANDS else 99,
        )

    return key


def _position(kind, value):
    orders = {
        "estimator": CANONICAL_ESTIMATORS + ("crude",),
        "method": METHODS + ("crude",),
        "learner": CANONICAL_LEARNERS + ("-",),
    }
    order = orders[kind]
    return order.index(value) if value in order else len(order)


RECORD_SORT_KEY = _sort_key(_position)


def _reason_from(exc: Exception) -> str:
    names = {
        ValueError: "invalid_input",
        EstimationError: "estimation_failed",
        NumericError: "numeric_failure",
        GenerationError: "generation_failed",
    }
    label = names.get(type(exc), type(exc).__name__.lower())
    return f"{label}: {exc}"


def run_replication(spec: ScenarioSpec, replication: int, config: RunConfig, tlf_hyper: dict) -> list[ReplicationRecord]:
    """All records for one replication; failures become invalid records."""
    start = time.perf_counter()
    rng = replication_rng(spec, replication, config.master_seed)
    cells = config.cells()

    def record(method, learner, estimator, estimand, value=float("nan"), se=None, ci=None,
               valid=False, reason="", diagnostics=None):
        return ReplicationRecord(
            spec.n, spec.rarity, spec.confounding, replication, method,
            learner if learner is not None else "-", estimator, estimand,
            float(value), se, ci[0] if ci else None, ci[1] if ci else None,
            valid, reason, diagnostics or {}, 0.0,
        )

    records: list[ReplicationRecord] = []
    try:
        ds = generate_dataset(spec, rng)
    except GenerationError as exc:
        reason = _reason_from(exc)
        for method, learner in cells:
            for estimand in config.estimands:
                for estimator in config.estimators:
                    records.append(record(method, learner, estimator, estimand, reason=reason))
        if config.crude:
            records.append(record("crude", None, "crude", "ATE", reason=reason))
        return records

    prop_cache: dict = {}

    def propensity(kind):
        if kind not in prop_cache:
            try:
                if kind == "oracle":
                    prop_cache[kind] = ("ok", ds.e_true, {})
                else:
                    learner = fit_learner(kind, ds.X, ds.T, "propensity")
                    diag = {"ridge_used": learner.model.ridge_used} if learner.model else {}
                    prop_cache[kind] = ("ok", learner.predict_all(ds.X), diag)
            except Exception as exc:  # noqa: BLE001 - failures are data here
                prop_cache[kind] = ("error", _reason_from(exc), {})
        return prop_cache[kind]

    surf_cache: dict = {}

    def surfaces(kind):
        if kind not in surf_cache:
            try:
                if kind == "oracle":
                    surf = ResponseSurfaces(ds.mu_true, ds.mu_true, "oracle")
                else:
                    ctrl = ds.T == 0.0
                    trt = ~ctrl
                    m0 = fit_learner(kind, ds.X[ctrl], ds.Y[ctrl], "outcome")
                    m1 = fit_learner(kind, ds.X[trt], ds.Y[trt], "outcome")
                    surf = ResponseSurfaces(m0.predict_all(ds.X), m1.predict_all(ds.X), kind)
                surf_cache[kind] = ("ok", surf)
            except Exception as exc:  # noqa: BLE001
                surf_cache[kind] = ("error", _reason_from(exc))
        return surf_cache[kind]

    weight_cache: dict = {}

    def balance(method, learner, estimand, postproc=None):
        key = (method, learner, estimand, postproc)
        if key not in weight_cache:
            try:
                if method == "iptw":
                    status, payload, diag = propensity(learner)
                    if status == "error":
                        weight_cache[key] = ("error", payload)
                        return weight_cache[key]
                    bw = iptw_weights(payload, ds.T, estimand, postproc or config.iptw_postproc)
                    bw.diagnostics.update(diag)
                elif method == "eb":
                    bw = energy_balance(ds.X, ds.T, estimand)
                elif method == "kom":
                    bw = kom_weights(ds.X, ds.T, ds.Y, estimand)
                else:
                    bw = tlf_weights(ds.X, ds.T, estimand, hyper=tlf_hyper.get(estimand))
                solver_status = bw.diagnostics.get("solver_status", "closed_form")
                if method == "tlf" and solver_status == "max_iter":
                    # a stalled ascent still yields a usable feasible model
                    bw.diagnostics["solver_status"] = solver_status = "max_iter_tlf"
                if solver_status not in _ACCEPTED_SOLVER_STATUSES:
                    weight_cache[key] = ("error", f"solver_{solver_status}")
                else:
                    weight_cache[key] = ("ok", bw)
            except Exception as exc:  # noqa: BLE001
                weight_cache[key] = ("error", _reason_from(exc))
        return weight_cache[key]

    dumped: list = []
    for method, learner in cells:
        surface_kind = learner if method == "iptw" else config.learners[0]
        for estimand in config.estimands:
            wstatus, wpayload = balance(method, learner, estimand)
            if wstatus == "ok" and config.dump_weights:
                dumped.append(wpayload)
            for estimator in config.estimators:
                if estimator == "AWA" and method == "iptw" and config.iptw_postproc == "trim99":
                    # the augmented estimator keeps every observation and
                    # truncates extreme weights instead of removing them
                    wstatus_e, wpayload_e = balance(method, learner, estimand, postproc="cap99")
                else:
                    wstatus_e, wpayload_e = wstatus, wpayload
                if wstatus_e == "error":
                    records.append(record(method, learner, estimator, estimand, reason=wpayload_e))
                    continue
                bw = wpayload_e
                diag = {"solver_status": bw.diagnostics.get("solver_status")}
                try:
                    if estimator == "WA":
                        est = weighted_average(ds.Y, ds.T, bw)
                    elif estimator == "OLS":
                        est = weighted_ols(ds.Y, ds.T, bw)
                    else:
                        sstatus, spayload = surfaces(surface_kind)
                        if sstatus == "error":
                            records.append(record(method, learner, estimator, estimand, reason=spayload))
                            continue
                        diag["surface_learner"] = surface_kind
                        est = augmented_weighted_average(ds.Y, ds.T, bw, spayload)
                except Exception as exc:  # noqa: BLE001
                    records.append(record(method, learner, estimator, estimand, reason=_reason_from(exc)))
                    continue
                reason = "" if est.valid else "out_of_range"
                records.append(
                    record(method, learner, estimator, estimand, est.value, est.se, est.ci95,
                           est.valid, reason, diag)
                )

    if config.crude:
        records.append(record("crude", None, "crude", "ATE", crude_estimate(ds), valid=True))

    if config.dump_weights and config.output_path and dumped:
        wdir = os.path.join(config.output_path, "weights")
        os.makedirs(wdir, exist_ok=True)
        weights_to_csv(dumped, os.path.join(wdir, f"{spec.n}_{spec.rarity}_{spec.confounding}_rep{replication:06d}.csv"))

    elapsed = time.perf_counter() - start
    for r in records:
        r.wall_time = elapsed
    return records


def tlf_hyperparameters(spec: ScenarioSpec, config: RunConfig) -> dict:
    """Per-scenario (lambda, gamma), selected once on a reserved-stream dataset."""
    if "tlf" not in config.methods:
        return {}
    ds = generate_dataset(spec, replication_rng(spec, HYPER_STREAM, config.master_seed))
    hyper = {}
    for estimand in config.estimands:
        key = (spec.n, spec.rarity, spec.confounding, config.master_seed, estimand)
        lam, gamma = cached_tlf_hyper(key, ds.X, ds.T, estimand)
        hyper[estimand] = {"lambda": lam, "gamma": gamma}
    return hyper


def _worker(args):
    scenario, replication, config, tlf_hyper = args
    spec = build_scenario(scenario[1], scenario[2], scenario[0], config.master_seed)
    return run_replication(spec, replication, config, tlf_hyper)


def run_scenario(config: RunConfig, scenario) -> list[ReplicationRecord]:
    """All replication records for one scenario, in deterministic order."""
    if isinstance(scenario, ScenarioSpec):
        scenario = (scenario.n, scenario.rarity, scenario.confounding)
    n, rarity, confounding = scenario
    spec = build_scenario(rarity, confounding, n, config.master_seed)
    tlf_hyper = tlf_hyperparameters(spec, config)
    tasks = [(scenario, rep, config, tlf_hyper) for rep in range(config.replications)]
    if config.workers == 1:
        batches = [_worker(t) for t in tasks]
    else:
        chunk = max(1, config.replications // (config.workers * 8))
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            batches = list(pool.map(_worker, tasks, chunksize=chunk))
    records = [r for batch in batches for r in batch]
    records.sort(key=RECORD_SORT_KEY)
    expected = config.replications * len(config.cells()) * len(config.estimators) * len(config.estimands)
    if config.crude:
        expected += config.replications
    assert len(records) == expected, f"record count {len(records)} != expected {expected}"
    return records


def run(config: RunConfig, progress=None) -> list[ReplicationRecord]:
    """Run every configured scenario; `progress` (if given) is called per scenario."""
    all_records: list[ReplicationRecord] = []
    for i, scenario in enumerate(config.scenarios):
        t0 = time.perf_counter()
        recs = run_scenario(config, scenario)
        all_records.extend(recs)
        if progress is not None:
            progress(i, scenario, time.perf_counter() - t0)
    return all_records


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def summarize(records, truth: float = 0.0, bound=(-1.0, 1.0)) -> list[MetricsSummary]:
    """One MetricsSummary per (scenario, estimator, method, learner, estimand) cell.

    Estimates outside `bound` (and failed records) are excluded from every
    moment; valid_pct reports the fraction retained.
    """
    groups: dict = {}
    for r in records:
        groups.setdefault(r.cell_key(), []).append(r)
    summaries = []
    for key in groups:
        rs = groups[key]
        vals = np.array(
            [r.value for r in rs if np.isfinite(r.value) and bound[0] <= r.value <= bound[1]]
        )
        m = vals.size
        covered = [
            (r.ci_lo <= truth <= r.ci_hi)
            for r in rs
            if r.ci_lo is not None
            and np.isfinite(r.value)
            and bound[0] <= r.value <= bound[1]
        ]
        if m == 0:
            summaries.append(MetricsSummary(*key, len(rs), 0.0, None, None, None, None, None, None))
            continue
        err = vals - truth
        bias = float(err.mean())
        mae = float(np.abs(err).mean())
        rmse_truth = float(np.sqrt((err**2).mean()))
        var = float(vals.var(ddof=1)) if m >= 2 else None
        spread = float(np.sqrt(var)) if var is not None else None
        coverage = float(np.mean(covered)) if covered else None
        summaries.append(
            MetricsSummary(*key, len(rs), m / len(rs), bias, mae, spread, var, rmse_truth, coverage)
        )
    summaries.sort(key=_sort_key(_position))
    return summaries


def coverage_rate(records, truth: float = 0.0) -> float:
    """Fraction of valid CI-carrying records whose interval contains the truth."""
    covered = [
        (r.ci_lo <= truth <= r.ci_hi)
        for r in records
        if r.ci_lo is not None and r.valid
    ]
    if not covered:
        return float("nan")
    return float(np.mean(covered))


# ---------------------------------------------------------------------------
# Configuration text format and result emission
# ---------------------------------------------------------------------------

_CONFIG_KEYS = (
    "grid", "scenarios", "n", "rarity", "confounding", "reps", "methods", "learners",
    "estimators", "estimands", "postproc", "seed", "out", "workers", "emit_raw",
    "crude", "dump_weights",
)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_text(text: str) -> dict:
    """key = value lines; '#' starts a comment; unknown keys are errors."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        mapping[key] = value
    return mapping


def _parse_bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ConfigError(f"{key} expects a boolean, got {value!r}")


def config_from_mapping(mapping: dict) -> RunConfig:
    """Build a RunConfig from string key/value pairs (config file or CLI)."""
    mapping = dict(mapping)
    unknown = set(mapping) - set(_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")

    use_grid = _parse_bool(mapping["grid"], "grid") if "grid" in mapping else False
    explicit = [k for k in ("n", "rarity", "confounding", "scenarios") if k in mapping]
    if use_grid and explicit:
        raise ConfigError("grid conflicts with explicit scenario selection")
    if use_grid:
        scenarios = tuple((s.n, s.rarity, s.confounding) for s in grid_scenarios())
    elif "scenarios" in mapping:
        scenarios = []
        for part in mapping["scenarios"].split(";"):
            part = part.strip()
            if not part:
                continue
            bits = part.split(":")
            if len(bits) != 3:
                raise ConfigError(f"bad scenario triple {part!r}; expected n:rarity:confounding")
            scenarios.append((int(bits[0]), bits[1], bits[2]))
        scenarios = tuple(scenarios)
    else:
        missing = [k for k in ("n", "rarity", "confounding") if k not in mapping]
        if missing:
            raise ConfigError(
                "select scenarios via grid=true, scenarios=..., or all of n/rarity/confounding "
                f"(missing {', '.join(missing)})"
            )
        scenarios = ((int(mapping["n"]), mapping["rarity"], mapping["confounding"]),)

    def split_list(key, default):
        if key not in mapping:
            return default
        return tuple(x.strip() for x in mapping[key].split(",") if x.strip())

    try:
        return RunConfig(
            scenarios=scenarios,
            replications=int(mapping.get("reps", 5000)),
            methods=split_list("methods", METHODS),
            learners=split_list("learners", CANONICAL_LEARNERS),
            estimators=split_list("estimators", CANONICAL_ESTIMATORS),
            estimands=split_list("estimands", ESTIMANDS),
            iptw_postproc=mapping.get("postproc", "trim99"),
            master_seed=int(mapping.get("seed", 0)),
            workers=int(mapping.get("workers", 1)),
            output_path=mapping.get("out"),
            emit_raw=_parse_bool(mapping.get("emit_raw", "false"), "emit_raw"),
            crude=_parse_bool(mapping.get("crude", "false"), "crude"),
            dump_weights=_parse_bool(mapping.get("dump_weights", "false"), "dump_weights"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_text(config: RunConfig) -> str:
    """Config echo in the same key=value format parse_config_text accepts."""
    grid = tuple((s.n, s.rarity, s.confounding) for s in grid_scenarios())
    lines = []
    if config.scenarios == grid:
        lines.append("grid = true")
    else:
        triples = ";".join(f"{n}:{r}:{c}" for n, r, c in config.scenarios)
        lines.append(f"scenarios = {triples}")
    lines.append(f"reps = {config.replications}")
    lines.append(f"methods = {','.join(config.methods)}")
    lines.append(f"learners = {','.join(config.learners)}")
    lines.append(f"estimators = {','.join(config.estimators)}")
    lines.append(f"estimands = {','.join(config.estimands)}")
    lines.append(f"postproc = {config.iptw_postproc}")
    lines.append(f"seed = {config.master_seed}")
    lines.append(f"workers = {config.workers}")
    lines.append(f"emit_raw = {str(config.emit_raw).lower()}")
    lines.append(f"crude = {str(config.crude).lower()}")
    lines.append(f"dump_weights = {str(config.dump_weights).lower()}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.6g}"


def summary_csv_lines(summaries) -> list[str]:
    lines = [SUMMARY_HEADER]
    for s in summaries:
        lines.append(
            ",".join(
                [
                    str(s.scenario_n), s.rarity, s.confounding, s.estimator, s.method,
                    s.learner, s.estimand, _fmt(s.valid_pct), _fmt(s.bias), _fmt(s.mae),
                    _fmt(s.spread_rmse), _fmt(s.var), _fmt(s.rmse_truth), _fmt(s.coverage),
                ]
            )
        )
    return lines


def emit_results(summaries, records, config: RunConfig, wall_time: float = 0.0) -> dict:
    """Write summary.csv, optional records.ndjson, and manifest.txt; returns paths."""
    out = config.output_path
    if out is None:
        raise ConfigError("no output path configured")
    try:
        os.makedirs(out, exist_ok=True)
        paths = {"summary": os.path.join(out, "summary.csv")}
        with open(paths["summary"], "w") as fh:
            fh.write("\n".join(summary_csv_lines(summaries)) + "\n")
        if config.emit_raw:
            paths["records"] = os.path.join(out, "records.ndjson")
            with open(paths["records"], "w") as fh:
                for r in records:
                    fh.write(json.dumps({
                        "scenario_n": r.scenario_n, "rarity": r.rarity,
                        "confounding": r.confounding, "replication": r.replication,
                        "method": r.method, "learner": r.learner, "estimator": r.estimator,
                        "estimand": r.estimand, "value": r.value, "se": r.se,
                        "ci_lo": r.ci_lo, "ci_hi": r.ci_hi, "valid": r.valid,
                        "reason": r.reason, "wall_time": r.wall_time,
                    }) + "\n")
        paths["manifest"] = os.path.join(out, "manifest.txt")
        with open(paths["manifest"], "w") as fh:
            fh.write("# balancebench run manifest; reusable as --config\n")
            fh.write(f"# wall_time_seconds = {wall_time:.3f}\n")
            fh.write(f"# python = {sys.version.split()[0]}\n")
            fh.write(f"# numpy = {np.__version__}\n")
            fh.write(config_to_text(config))
        return paths
    except OSError as exc:
        raise ConfigError(f"cannot write results under {out!r}: {exc}") from exc
