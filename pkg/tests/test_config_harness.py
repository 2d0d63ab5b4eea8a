import csv
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlsim import cli, harness
from mtlsim.config import ExperimentConfig, apply_quick, dump_config, parse_config, set_value
from mtlsim.environment import MULTI, SINGLE
from mtlsim.network import ConfigurationError
from mtlsim.selftest import CheckResult, has_marker, marker_path, write_marker


def tiny(experiment, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    base = {
        "run.experiment": experiment,
        "run.seeds": "0, 1",
        "env.items": "16",
        "train.trials": "60",
        "metrics.eval_items": "64",
        "overlap.percents": "0, 100",
        "regimen.percents": "0, 90",
        "regimen.init_scales": "high, low",
        "meta.tau": "120",
        "meta.repeats": "1",
        "meta.costs": "0, 1",
        "meta.noise_sds": "0",
        "meta.svgd_steps": "10",
    }
    base.update(overrides)
    for k, v in base.items():
        set_value(cfg, k, v)
    return cfg


def quiet(msg):
    pass


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- config


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert dump_config(parse_config(dump_config(cfg))) == dump_config(cfg)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(0, 10**6), min_size=1, max_size=6),
    st.floats(0, 1, allow_nan=False),
    st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=5),
    st.integers(1, 10**5),
    st.booleans(),
)
def test_round_trip_property(seeds, cost, percents, tau, snaps):
    cfg = ExperimentConfig()
    cfg.run.seeds = seeds
    cfg.meta.costs = [cost]
    cfg.regimen.percents = percents
    cfg.meta.tau = tau
    cfg.meta.snapshots = snaps
    again = parse_config(dump_config(cfg))
    assert again == cfg


def test_comments_and_blank_lines():
    cfg = parse_config("# header\n\nmeta.tau = 300  # inline\nrun.seeds = 3, 4\n")
    assert cfg.meta.tau == 300 and cfg.run.seeds == [3, 4]


@pytest.mark.parametrize(
    "text,key",
    [
        ("meta.tau = many", "meta.tau"),
        ("meta.costs = 0, 1.5", "meta.costs"),
        ("run.workers = 0", "run.workers"),
        ("nosuch.key = 1", "nosuch.key"),
        ("run.experiment = everything", "run.experiment"),
        ("regimen.init_scales = medium", "regimen.init_scales"),
        ("meta.gamma = 0", "meta.gamma"),
        ("just words", "line 1"),
    ],
)
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigurationError, match=key.replace(".", r"\.")):
        parse_config(text)


def test_quick_overrides():
    cfg = apply_quick(ExperimentConfig())
    assert cfg.run.seeds == [0, 1, 2, 3, 4]
    assert (cfg.meta.tau, cfg.env.items, cfg.meta.repeats) == (2000, 64, 10)
    # the preset list is copied, not shared
    cfg.run.seeds.append(9)
    assert apply_quick(ExperimentConfig()).run.seeds == [0, 1, 2, 3, 4]


# ---------------------------------------------------------------- harness helpers


def test_mean_ci_examples():
    n, m, lo, hi = harness.mean_ci([1.0, 2.0, 3.0])
    # t(0.975, 2) = 4.302653; sd = 1
    half = 4.302653 / np.sqrt(3)
    assert (n, m) == (3, 2.0)
    assert lo == pytest.approx(2 - half, abs=1e-5) and hi == pytest.approx(2 + half, abs=1e-5)
    assert harness.mean_ci([5.0]) == (1, 5.0, 5.0, 5.0)
    assert harness.mean_ci([None, None]) == (0, None, None, None)
    assert harness.mean_ci([None, 4.0])[0] == 1


def test_fmt():
    assert harness.fmt(None) == ""
    assert harness.fmt(np.int64(7)) == "7"
    assert harness.fmt(1 / 3) == "0.333333333"
    assert harness.fmt(float("nan")) == "nan"


def test_load_config_rejects_garbage(tmp_path):
    with pytest.raises(ConfigurationError):
        harness.load_config(tmp_path / "missing.cfg")
    bad = tmp_path / "m.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        harness.load_config(bad)


def _spy_manifest_first(monkeypatch, out):
    seen = []
    real = harness.Writer.table

    def table(self, name, header, rows):
        seen.append((out / "manifest.json").exists())
        return real(self, name, header, rows)

    monkeypatch.setattr(harness.Writer, "table", table)
    return seen


# ---------------------------------------------------------------- sweeps


@pytest.fixture(scope="module")
def overlap_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("overlap")
    res = harness.run_experiment(tiny("overlap"), out, log=quiet)
    return out, res


def test_overlap_outputs(overlap_run):
    out, res = overlap_run
    assert sorted(res) == ["overlap0", "overlap100"]
    assert len(list((out / "curves").glob("*.csv"))) == 4
    man = json.loads((out / "manifest.json").read_text())
    assert man["experiment"] == "overlap" and man["seeds"] == [0, 1]
    assert "elapsed_seconds" in man and "curves/overlap0_seed0.csv" in man["results"]
    corr = read_csv(out / "correlations.csv")
    assert len(corr) == 2 * 2 * len(harness.CORRELATION_PAIRS)
    curve = read_csv(out / "curves" / "overlap100_seed1.csv")
    assert len(curve) == 60 and {r["strategy"] for r in curve} == {SINGLE}


def test_summary_matches_raw_rows(overlap_run):
    out, _ = overlap_run
    raw = read_csv(out / "multitask_error.csv")
    summ = {(r["condition"], r["metric"]): r for r in read_csv(out / "summary.csv")}
    vals = [float(r["error"]) for r in raw if r["condition"] == "overlap0" and r["task"] == "2"]
    row = summ[("overlap0", "multitask_error.task2")]
    n, m, lo, hi = harness.mean_ci(vals)
    assert int(row["n"]) == n == 2
    assert float(row["mean"]) == pytest.approx(m, abs=1e-8)
    assert float(row["ci_low"]) <= float(row["mean"]) <= float(row["ci_high"])


def test_manifest_written_first(tmp_path, monkeypatch):
    seen = _spy_manifest_first(monkeypatch, tmp_path)
    harness.run_experiment(tiny("regimen", **{"run.seeds": "0", "regimen.percents": "50"}), tmp_path, log=quiet)
    assert seen and all(seen)


def test_regimen_conditions(tmp_path):
    res = harness.run_experiment(tiny("regimen", **{"run.seeds": "3"}), tmp_path, log=quiet)
    assert sorted(res) == ["high_mix0", "high_mix90", "low_mix0", "low_mix90"]
    strategies = res["low_mix0"][0]["strategies"]
    assert set(strategies) == {SINGLE}


def test_meta_outputs(tmp_path, monkeypatch):
    seen = _spy_manifest_first(monkeypatch, tmp_path)
    res = harness.run_experiment(tiny("meta"), tmp_path, log=quiet, selftest_skipped=True)
    assert all(seen)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["selftest_skipped"] is True and "0" in man["environments"]
    rows = read_csv(tmp_path / "meta_totals.csv")
    assert len(rows) == 2 * 3
    by = {(r["cost"], r["policy"]): float(r["total_reward"]) for r in rows}
    # serial totals are halved at full cost, multitask totals untouched
    assert by[("1", "single")] == pytest.approx(by[("0", "single")] / 2, rel=1e-8)
    assert by[("1", "multi")] == by[("0", "multi")]
    trial = read_csv(tmp_path / "trials" / "noise0_cost1_rep0.csv")
    assert {r["strategy"] for r in trial} <= {SINGLE, MULTI}
    for r in trial:
        factor = 0.5 if r["strategy"] == SINGLE else 1.0
        assert float(r["adjusted_reward"]) == pytest.approx(factor * float(r["raw_reward"]), abs=1e-8)
    assert (tmp_path / "snapshots" / "noise0_cost1_rep0.jsonl").exists()
    assert set(res["summary"][(0.0, 1.0)]) == {"meta", "single", "multi", "fraction_single"}


def _numeric_files(out: Path):
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*.csv"))}


def test_rerun_from_manifest_is_byte_identical(overlap_run, tmp_path):
    out, _ = overlap_run
    cfg = harness.load_config(out / "manifest.json")
    harness.run_experiment(cfg, tmp_path, log=quiet)
    assert _numeric_files(out) == _numeric_files(tmp_path)


def test_worker_pool_matches_serial(tmp_path):
    cfg = tiny("overlap", **{"overlap.percents": "50", "train.trials": "30"})
    harness.run_experiment(cfg, tmp_path / "serial", log=quiet)
    cfg.run.workers = 2
    harness.run_experiment(cfg, tmp_path / "pool", log=quiet)
    assert _numeric_files(tmp_path / "serial") == _numeric_files(tmp_path / "pool")


def test_non_sweep_experiment_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        harness.run_experiment(tiny("svgd-selftest"), tmp_path, log=quiet)


# ---------------------------------------------------------------- CLI and marker


@pytest.fixture
def cache(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("MTLSIM_CACHE_DIR", str(d))
    return d


def test_cli_bad_config_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("meta.tau = soon\n")
    assert cli.main(["overlap", "--config", str(bad)]) == 1
    assert "meta.tau" in capsys.readouterr().err
    assert cli.main(["overlap", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert cli.main(["overlap", "--workers", "0"]) == 1
    assert cli.main(["regimen", "--seed", "-1"]) == 1


def test_cli_gradcheck_fault_inject_exit_2(capsys):
    assert cli.main(["gradcheck", "--nets", "2", "--fault-inject"]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_cli_gradcheck_clean_exit_0(capsys):
    assert cli.main(["gradcheck", "--nets", "1"]) == 0


def test_cli_meta_needs_marker(cache, tmp_path, capsys):
    assert cli.main(["meta", "--out", str(tmp_path / "m")]) == 2
    assert "self-test" in capsys.readouterr().err
    assert not (tmp_path / "m").exists()


def test_cli_runs_overlap_with_overrides(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(dump_config(tiny("regimen", **{"run.seeds": "0", "overlap.percents": "100"})))
    out = tmp_path / "o"
    assert cli.main(["overlap", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    again = parse_config(man["config"])
    assert again.run.experiment == "overlap" and again.env.seed == 4 and again.run.out == str(out)


def test_marker_bound_to_cache_dir(cache):
    assert not has_marker()
    p = write_marker([CheckResult("x", True, "ok")])
    assert p == marker_path() and p.parent == cache and has_marker()
    assert p.read_text() == "x ok\n"
