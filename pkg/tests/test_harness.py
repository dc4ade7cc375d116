import json
import os

import numpy as np
import pytest

import balancebench as bb
from balancebench.errors import ConfigError
from balancebench.harness import (
    MetricsSummary,
    ReplicationRecord,
    RunConfig,
    config_from_mapping,
    config_to_text,
    parse_config_text,
    run_scenario,
    summary_csv_lines,
)


def small_config(**kw):
    base = dict(
        scenarios=((250, "common", "low"),),
        replications=2,
        methods=("iptw",),
        learners=("oracle",),
        estimators=("WA",),
        estimands=("ATE",),
        master_seed=3,
    )
    base.update(kw)
    return RunConfig(**base)


def rec(value, estimator="WA", ci=None, reason="", cell=("iptw", "oracle", "ATE")):
    method, learner, estimand = cell
    valid = reason == "" and np.isfinite(value) and abs(value) <= 1
    return ReplicationRecord(
        500, "common", "low", 0, method, learner, estimator, estimand,
        value, None if ci is None else 0.1,
        None if ci is None else ci[0], None if ci is None else ci[1],
        valid, reason,
    )


def test_minimal_run_cardinality():
    records = run_scenario(small_config(), (250, "common", "low"))
    assert len(records) == 2
    assert all(r.valid for r in records)
    assert {r.replication for r in records} == {0, 1}


def test_cell_cardinality_learner_crossing():
    config = small_config(
        replications=3,
        methods=("iptw", "eb"),
        learners=("oracle", "logistic_mis"),
        estimators=("WA", "OLS"),
        estimands=("ATE", "ATT"),
    )
    records = run_scenario(config, (250, "common", "low"))
    # iptw crosses 2 learners, eb carries none: (2 + 1) cells x 2 x 2 x 3 reps
    assert len(records) == 3 * 3 * 2 * 2
    eb_learners = {r.learner for r in records if r.method == "eb"}
    assert eb_learners == {"-"}


def test_records_deterministic_across_worker_counts():
    config = small_config(replications=6, methods=("iptw", "eb"), estimators=("WA", "OLS"))
    serial = run_scenario(config, (250, "common", "low"))
    parallel = run_scenario(
        small_config(replications=6, methods=("iptw", "eb"), estimators=("WA", "OLS"), workers=2),
        (250, "common", "low"),
    )

    def strip(records):
        return [
            (r.scenario_n, r.rarity, r.confounding, r.replication, r.method, r.learner,
             r.estimator, r.estimand, r.value, r.se, r.ci_lo, r.ci_hi, r.valid, r.reason)
            for r in records
        ]

    assert strip(serial) == strip(parallel)


def test_failures_are_recorded_not_raised():
    config = small_config(
        scenarios=((250, "very_rare", "high"),),
        replications=25,
        methods=("eb",),
        estimators=("WA",),
        estimands=("ATE",),
    )
    records = run_scenario(config, (250, "very_rare", "high"))
    assert len(records) == 25
    valid = [r for r in records if r.valid]
    assert len(valid) >= 1
    for r in records:
        if not r.valid:
            assert r.reason != ""


def test_awa_uses_truncated_weights_under_trim99():
    config = small_config(estimators=("AWA",), replications=2)
    records = run_scenario(config, (250, "common", "low"))
    assert len(records) == 2
    assert all(r.valid for r in records)


def test_summarize_basic_cells():
    records = [rec(0.1), rec(-0.1)]
    (s,) = bb.summarize(records)
    assert s.count == 2 and s.valid_pct == 1.0
    assert s.bias == pytest.approx(0.0, abs=1e-15)
    assert s.mae == pytest.approx(0.1)
    assert s.var == pytest.approx(0.02)
    assert s.spread_rmse == pytest.approx(0.1414, abs=5e-4)
    assert s.rmse_truth == pytest.approx(0.1)
    assert s.coverage is None


def test_summarize_excludes_out_of_range():
    records = [rec(0.5), rec(1.5)]
    (s,) = bb.summarize(records)
    assert s.valid_pct == 0.5
    assert s.bias == pytest.approx(0.5)
    assert s.var is None  # single valid estimate has no sample variance


def test_summarize_zero_valid():
    records = [rec(float("nan"), reason="solver_max_iter")]
    (s,) = bb.summarize(records)
    assert s.valid_pct == 0.0 and s.bias is None and s.coverage is None


def test_rmse_decomposition_identity():
    rng = np.random.default_rng(0)
    records = [rec(v) for v in rng.normal(0.03, 0.05, 40)]
    (s,) = bb.summarize(records)
    m = s.count
    pop_var = s.var * (m - 1) / m
    assert s.rmse_truth**2 == pytest.approx(s.bias**2 + pop_var, abs=1e-12)
    assert s.rmse_truth >= s.mae >= abs(s.bias)
    assert s.spread_rmse**2 == pytest.approx(s.var, abs=1e-12)


def test_coverage_rate():
    hits = [rec(0.0, estimator="OLS", ci=(-0.1, 0.1)) for _ in range(4)]
    assert bb.coverage_rate(hits) == 1.0
    misses = [rec(0.3, estimator="OLS", ci=(0.2, 0.4)) for _ in range(4)]
    assert bb.coverage_rate(misses) == 0.0
    assert np.isnan(bb.coverage_rate([rec(0.1)]))


def test_summary_coverage_only_for_ci_records():
    records = [rec(0.0, estimator="OLS", ci=(-0.1, 0.1)), rec(0.2, estimator="OLS", ci=(0.3, 0.4))]
    (s,) = bb.summarize(records)
    assert s.coverage == 0.5


def test_emit_results_files(tmp_path):
    config = small_config(
        replications=2, estimands=("ATE", "ATT"),
        output_path=str(tmp_path), emit_raw=True,
    )
    records = run_scenario(config, (250, "common", "low"))
    summaries = bb.summarize(records)
    paths = bb.emit_results(summaries, records, config, wall_time=1.0)

    lines = open(paths["summary"]).read().strip().splitlines()
    assert lines[0] == (
        "scenario_n,rarity,confounding,estimator,method,learner,estimand,"
        "valid_pct,bias,mae,spread_rmse,var,rmse_truth,coverage"
    )
    assert len(lines) == 3  # header + 2 estimand cells

    raw = [json.loads(l) for l in open(paths["records"]).read().splitlines()]
    assert len(raw) == 4
    manifest = open(paths["manifest"]).read()
    assert "seed = 3" in manifest


def test_summary_roundtrip_to_printed_precision(tmp_path):
    config = small_config(replications=5, output_path=str(tmp_path))
    records = run_scenario(config, (250, "common", "low"))
    summaries = bb.summarize(records)
    bb.emit_results(summaries, records, config)
    lines = open(os.path.join(str(tmp_path), "summary.csv")).read().strip().splitlines()
    row = lines[1].split(",")
    s = summaries[0]
    assert float(row[7]) == pytest.approx(s.valid_pct, rel=1e-5)
    assert float(row[8]) == pytest.approx(s.bias, rel=1e-5)


def test_manifest_replay_reproduces_summary(tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    config = config_from_mapping({
        "n": "250", "rarity": "common", "confounding": "low",
        "reps": "4", "methods": "iptw,eb", "learners": "oracle",
        "estimators": "WA,OLS", "estimands": "ATE", "seed": "9",
        "out": str(out1),
    })
    records = run_scenario(config, config.scenarios[0])
    paths = bb.emit_results(bb.summarize(records), records, config)

    mapping = parse_config_text(open(paths["manifest"]).read())
    mapping["out"] = str(out2)
    replay = config_from_mapping(mapping)
    records2 = run_scenario(replay, replay.scenarios[0])
    bb.emit_results(bb.summarize(records2), records2, replay)

    a = open(out1 / "summary.csv").read()
    b = open(out2 / "summary.csv").read()
    assert a == b


def test_config_parsing_errors():
    with pytest.raises(ConfigError):
        parse_config_text("reps = 5\nbogus_key = 1\n")
    with pytest.raises(ConfigError):
        parse_config_text("just some text\n")
    with pytest.raises(ConfigError):
        config_from_mapping({"grid": "true", "n": "250", "out": "x"})
    with pytest.raises(ConfigError):
        config_from_mapping({"n": "250", "rarity": "common"})
    with pytest.raises(ConfigError):
        config_from_mapping({
            "n": "250", "rarity": "common", "confounding": "low", "methods": "iptw,magic",
        })
    with pytest.raises(ConfigError):
        RunConfig(scenarios=((250, "common", "low"),), replications=0)


def test_config_text_roundtrip():
    config = config_from_mapping({"grid": "true", "reps": "7", "seed": "5"})
    text = config_to_text(config)
    again = config_from_mapping(parse_config_text(text))
    assert again.scenarios == config.scenarios
    assert again.replications == 7 and again.master_seed == 5


def test_tlf_through_harness_uses_cached_hyper():
    config = small_config(
        scenarios=((100, "common", "low"),),
        replications=2,
        methods=("tlf",),
        estimators=("WA",),
        estimands=("ATE",),
    )
    records = run_scenario(config, (100, "common", "low"))
    assert len(records) == 2
    assert all(r.learner == "-" for r in records)
    assert all(r.valid for r in records)


def test_crude_mode_adds_records():
    config = small_config(crude=True)
    records = run_scenario(config, (250, "common", "low"))
    crude = [r for r in records if r.method == "crude"]
    assert len(crude) == 2
    assert all(abs(r.value) <= 1 for r in crude)


def test_summary_csv_formatting_absent_fields():
    s = MetricsSummary(250, "common", "low", "WA", "eb", "-", "ATE",
                       10, 0.0, None, None, None, None, None, None)
    line = summary_csv_lines([s])[1]
    assert line == "250,common,low,WA,eb,-,ATE,0,,,,,,"


def test_weight_dump_files(tmp_path):
    config = small_config(output_path=str(tmp_path), dump_weights=True)
    run_scenario(config, (250, "common", "low"))
    files = sorted(os.listdir(tmp_path / "weights"))
    assert len(files) == 2
    header = open(tmp_path / "weights" / files[0]).readline().strip()
    assert header == "index,method,estimand,weight,kept"
