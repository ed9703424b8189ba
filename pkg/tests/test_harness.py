import json

import numpy as np
import pytest
import yaml

from adabatch import cli, harness
from adabatch.harness import (
    ConfigError,
    METRIC_COLUMNS,
    emit_metrics,
    parse_config,
    read_metrics,
    run_experiment,
    spec_from_dict,
    summarize_dir,
)
from adabatch.trainer import RunMetrics, StepRecord

OBJ = {"kind": "quadratic", "n": 256, "d": 4, "holdout": 32}
SMALL_DEFAULTS = {"workers": 2, "accumulation_steps": 1, "initial_batch": 8, "max_global_batch": 128}


def write_config(tmp_path, **kw):
    raw = {"name": "t", "out_dir": str(tmp_path / "out"), "seeds": [0], "sample_budget": 400,
           "objective": OBJ, "defaults": SMALL_DEFAULTS,
           "variants": [{"name": "adaptive", "eta": 0.3}, {"name": "b32", "schedule": {"constant": 32}}]}
    raw.update(kw)
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_minimal_config_applies_defaults():
    spec = spec_from_dict({"objective": {"kind": "logistic"}, "sample_budget": 10000})
    (name, cfg), = spec.variants
    assert name == "adaptive" and spec.seeds == [0]
    a = cfg.adam
    assert (a.beta1, a.beta2, a.eps, a.weight_decay, a.clip_norm) == (0.9, 0.95, 1e-8, 0.1, 1.0)
    assert (cfg.workers, cfg.accumulation_steps, cfg.initial_batch) == (4, 16, 256)
    assert cfg.norm_test.eta == 0.2 and cfg.norm_test.max_global_batch == 8192
    sched = cfg.schedule
    assert (sched.peak, sched.min, sched.warmup_samples) == (4e-4, 4e-5, 100)


@pytest.mark.parametrize("raw, match", [
    ({"variants": [{"name": "x", "eta": 1.5}]}, r"eta.*\(0, 1\)"),
    ({"variants": [{"name": "x", "initial_batch": 9}]}, "initial_batch.*divisible"),
    ({"variants": [{"name": "x", "learning_rate": 0.1}]}, "unknown key"),
    ({"colour": "red"}, "unknown key"),
    ({"variants": [{"name": "x"}, {"name": "x"}]}, "duplicate"),
    ({"variants": [{"name": "x", "schedule": {"cyclic": 3}}]}, "schedule"),
    ({"sample_budget": 0}, "sample_budget"),
    ({"variants": [{"name": "x", "schedule": {"stagewise": [[0.5, 16]]}}]}, "sum to 1"),
])
def test_config_rejections(raw, match):
    base = {"objective": {"kind": "quadratic"}, "sample_budget": 1000, "defaults": SMALL_DEFAULTS}
    base.update(raw)
    with pytest.raises(ConfigError, match=match):
        spec_from_dict(base)


def test_missing_key_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError, match="sample_budget"):
        spec_from_dict({"objective": {"kind": "quadratic"}})
    bad = tmp_path / "bad.yaml"
    bad.write_text("objective: [unclosed\n")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "missing.yaml")


def test_metrics_file_format_and_round_trip(tmp_path):
    recs = [StepRecord(k, 8 * k, 8, 1e-3 / 3, 0.1 * k, 2.0 ** -k,
                       0.5 if k % 2 else None, (1 / 7) if k == 10 else None, k * 1e-3) for k in range(1, 11)]
    path = emit_metrics(RunMetrics(recs), tmp_path / "m" / "metrics.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 11
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert lines[2].split(",")[6:8] == ["", ""]
    assert read_metrics(path).records == recs


def test_emit_metrics_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_metrics(RunMetrics([]), blocker / "metrics.csv")


def test_run_experiment_outputs(tmp_path):
    spec = parse_config(write_config(tmp_path))
    results = run_experiment(spec)
    assert [r.error for r in results] == [None, None]
    out = tmp_path / "out"
    shas = {json.loads((out / v / "seed0" / "run.json").read_text())["dataset_sha256"] for v in ("adaptive", "b32")}
    assert len(shas) == 1
    for r in results:
        m = read_metrics(out / r.variant / "seed0" / "metrics.csv")
        assert m.records == r.metrics.records
        assert r.summary.avg_batch == pytest.approx(m.samples / m.steps)
    rows = summarize_dir(out)
    assert [(r.scheme, r.seed) for r in rows] == [("adaptive", "0"), ("b32", "0")]
    assert 8 < rows[0].avg_batch < 128
    assert rows[1].steps == 13 and rows[1].avg_batch == 32
    assert (out / "summary.csv").exists() and "b32" in (out / "summary.txt").read_text()


def test_single_variant_single_seed(tmp_path):
    spec = parse_config(write_config(tmp_path, variants=[{"name": "only", "schedule": {"constant": 16}}]))
    run_experiment(spec)
    assert len(list((tmp_path / "out").glob("*/seed*/metrics.csv"))) == 1
    assert len(summarize_dir(tmp_path / "out")) == 1


def test_seed_mean_row(tmp_path):
    spec = parse_config(write_config(tmp_path, seeds=[0, 1], variants=[{"name": "c", "schedule": {"constant": 16}}]))
    run_experiment(spec)
    rows = summarize_dir(tmp_path / "out")
    assert [r.seed for r in rows] == ["0", "1", "mean"]
    assert rows[2].best_loss == pytest.approx((rows[0].best_loss + rows[1].best_loss) / 2)


def test_failed_run_is_recorded_and_others_continue(tmp_path, monkeypatch):
    real = harness.run_training

    def flaky(cfg, objective=None, holdout=None):
        if cfg.schedule_mode == "adaptive":
            raise RuntimeError("rank 1, step 3: boom")
        return real(cfg, objective, holdout)

    monkeypatch.setattr(harness, "run_training", flaky)
    results = run_experiment(parse_config(write_config(tmp_path)))
    assert results[0].error and "boom" in results[0].error
    assert results[1].error is None
    assert (tmp_path / "out" / "adaptive" / "seed0" / "error.txt").exists()
    assert (tmp_path / "out" / "b32" / "seed0" / "metrics.csv").exists()
    assert cli.main(["run", str(write_config(tmp_path))]) == 1


def test_cli_run_summarize_check(tmp_path, capsys):
    path = write_config(tmp_path)
    assert cli.main(["run", str(path), "--seed", "3", "--workers", "4", "--out", str(tmp_path / "o2")]) == 0
    assert (tmp_path / "o2" / "b32" / "seed3" / "metrics.csv").exists()
    assert cli.main(["summarize", str(tmp_path / "o2")]) == 0
    assert "b32" in capsys.readouterr().out
    assert cli.main(["summarize", str(tmp_path / "empty")]) == 1
    assert cli.main(["check"]) == 0
    assert capsys.readouterr().out.count("[PASS]") == 6


def test_cli_config_error_exit_code(tmp_path):
    path = write_config(tmp_path, variants=[{"name": "x", "eta": 2.0}])
    assert cli.main(["run", str(path)]) == 2
    assert cli.main(["run", str(write_config(tmp_path)), "--workers", "3"]) == 2


def test_rerun_is_byte_identical(tmp_path):
    path = write_config(tmp_path)
    spec = parse_config(path)
    run_experiment(spec)
    first = {p.relative_to(tmp_path): p.read_bytes() for p in (tmp_path / "out").rglob("metrics.csv")}
    spec.out_dir = tmp_path / "again"
    run_experiment(spec)
    second = {p.relative_to(tmp_path / "again"): p.read_bytes() for p in (tmp_path / "again").rglob("metrics.csv")}
    assert {k.relative_to("out"): v for k, v in first.items()} == second
    assert np.all([len(v) > 0 for v in second.values()])
