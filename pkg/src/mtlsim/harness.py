"""Batch experiments: overlap sweep, training-regimen sweep, meta-learner sweep.

Every experiment writes ``manifest.json`` before any result file. The
manifest echoes the full configuration, so ``--config manifest.json``
reruns the experiment and reproduces every numeric column exactly.
Runs can be farmed out to a process pool; all files are written by the
parent process in job order.
"""

from __future__ import annotations

import csv
import json
import multiprocessing as mp
import os
import platform
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import stats

from . import __version__
from .config import ExperimentConfig, dump_config, parse_config
from .environment import MULTI, SINGLE, apply_serialization_cost, build_environment, environment_record, generate_eval_set
from .meta import MetaConfig, network_executor, run_agent, run_fixed
from .metrics import mean_representation, multitask_error, representation_correlation, trials_to_threshold
from .network import ConfigurationError, default_config, init_network
from .regimen import OverlapConfig, install_overlap, install_shared_init, run_mixed_regimen

# (layer, task a, task b), 0-based tasks: each layer's two single-task users
CORRELATION_PAIRS = (("a1", 0, 1), ("b1", 2, 3), ("b2", 2, 3), ("out0", 0, 2), ("out1", 1, 3))


def _print(msg: str) -> None:
    print(msg, flush=True)


def fmt(x) -> str:
    """Numbers in CSVs: 9 significant digits, empty for missing."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if not np.isfinite(x):
        return "nan"
    return f"{x:.9g}"


def mean_ci(values, level: float = 0.95):
    """Mean with a two-sided Student-t interval; the interval collapses for n < 2."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return 0, None, None, None
    m = float(v.mean())
    if v.size < 2:
        return 1, m, m, m
    half = stats.t.ppf(0.5 + level / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size)
    return v.size, m, m - half, m + half


def load_config(path) -> ExperimentConfig:
    """Read a ``key = value`` config file or a previous run's manifest."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if path.suffix == ".json":
        try:
            text = json.loads(text)["config"]
        except (ValueError, KeyError, TypeError):
            raise ConfigurationError(f"{path} is not a manifest with a 'config' entry") from None
    return parse_config(text)


class Writer:
    """Owns the output directory; only the parent process writes."""

    def __init__(self, out):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: List[str] = []

    def manifest(self, cfg: ExperimentConfig, extra: Optional[dict] = None) -> None:
        m = {
            "package": "mtlsim",
            "version": __version__,
            "experiment": cfg.run.experiment,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seeds": list(cfg.run.seeds),
            "config": dump_config(cfg),
        }
        m.update(extra or {})
        m["results"] = self.files
        (self.out / "manifest.json").write_text(json.dumps(m, indent=2) + "\n")
        self._manifest = m

    def finish(self, elapsed: float) -> None:
        self._manifest["results"] = sorted(set(self.files))
        self._manifest["elapsed_seconds"] = round(elapsed, 3)
        (self.out / "manifest.json").write_text(json.dumps(self._manifest, indent=2) + "\n")

    def table(self, name: str, header, rows) -> None:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([c if isinstance(c, str) else fmt(c) for c in r])
        self.files.append(name)

    def jsonl(self, name: str, records) -> None:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        self.files.append(name)


def _map(fn: Callable, jobs: List[dict], workers: int):
    """Ordered map; a pool only when it helps."""
    if workers <= 1 or len(jobs) <= 1:
        yield from map(fn, jobs)
        return
    with mp.get_context("spawn").Pool(min(workers, len(jobs))) as pool:
        yield from pool.imap(fn, jobs)


# ---------------------------------------------------------------- training sweeps


def _train_job(job: dict) -> dict:
    cfg = parse_config(job["config"])
    env = build_environment(cfg.env.seed, noise_sd=cfg.env.noise_sd)
    net = init_network(default_config(beta=cfg.train.beta), job["seed"])
    if job["kind"] == "overlap":
        install_overlap(net, OverlapConfig(job["percent"]))
        mix = 0.0
    else:
        install_shared_init(net, None if job["init"] == "high" else net.beta)
        mix = job["percent"]
    curve = run_mixed_regimen(net, env, cfg.train.trials, mix, job["seed"], cfg.env.items, cfg.train.base_lr)
    ev = generate_eval_set(env, cfg.metrics.eval_items)
    corr = {}
    for layer, a, b in CORRELATION_PAIRS:
        corr[layer] = representation_correlation(
            mean_representation(net, ev, a, layer), mean_representation(net, ev, b, layer)
        )
    return {
        "job": job,
        "trials": curve.trials,
        "accuracy": curve.accuracy,
        "strategies": curve.strategies,
        "correlation": corr,
        "multitask_error": [multitask_error(net, ev, t, env) for t in range(env.n_tasks)],
        "trials_to_threshold": [
            trials_to_threshold(curve, t, cfg.metrics.threshold, cfg.metrics.window) for t in range(env.n_tasks)
        ],
    }


def _condition(job: dict) -> str:
    if job["kind"] == "overlap":
        return f"overlap{fmt(job['percent'])}"
    return f"{job['init']}_mix{fmt(job['percent'])}"


def _run_training_sweep(cfg: ExperimentConfig, jobs: List[dict], out, log) -> Dict[str, List[dict]]:
    t0 = time.time()
    w = Writer(out)
    env = build_environment(cfg.env.seed, noise_sd=cfg.env.noise_sd)
    w.manifest(
        cfg,
        {
            "environment": environment_record(env),
            "conditions": sorted({_condition(j) for j in jobs}),
            "correlation_activation": "post",
        },
    )
    text = dump_config(cfg)
    for j in jobs:
        j["config"] = text
    by_cond: Dict[str, List[dict]] = {}
    corr_rows, err_rows, ttt_rows = [], [], []
    for res in _map(_train_job, jobs, cfg.run.workers):
        job = res["job"]
        cond = _condition(job)
        by_cond.setdefault(cond, []).append(res)
        acc = res["accuracy"]
        w.table(
            f"curves/{cond}_seed{job['seed']}.csv",
            ["trial", "strategy"] + [f"task{t + 1}" for t in range(acc.shape[1])],
            ([int(tr), s] + list(a) for tr, s, a in zip(res["trials"], res["strategies"], acc)),
        )
        for layer, a, b in CORRELATION_PAIRS:
            corr_rows.append([cond, job["seed"], layer, f"{a + 1}-{b + 1}", res["correlation"][layer]])
        for t, e in enumerate(res["multitask_error"]):
            err_rows.append([cond, job["seed"], t + 1, e])
        for t, n in enumerate(res["trials_to_threshold"]):
            ttt_rows.append([cond, job["seed"], t + 1, n])
        log(f"{cond} seed {job['seed']}: trials-to-threshold {res['trials_to_threshold']}")
    w.table("correlations.csv", ["condition", "seed", "layer", "task_pair", "correlation"], corr_rows)
    w.table("multitask_error.csv", ["condition", "seed", "task", "error"], err_rows)
    w.table("trials_to_threshold.csv", ["condition", "seed", "task", "trials"], ttt_rows)
    summary = []
    for cond, runs in by_cond.items():
        n_tasks = len(runs[0]["multitask_error"])
        for t in range(n_tasks):
            ttt = [r["trials_to_threshold"][t] for r in runs]
            summary.append([cond, f"trials_to_threshold.task{t + 1}", *mean_ci(ttt)])
            summary.append([cond, f"multitask_error.task{t + 1}", *mean_ci([r["multitask_error"][t] for r in runs])])
        for layer, a, b in CORRELATION_PAIRS:
            summary.append([cond, f"correlation.{layer}", *mean_ci([r["correlation"][layer] for r in runs])])
    w.table("summary.csv", ["condition", "metric", "n", "mean", "ci_low", "ci_high"], summary)
    w.finish(time.time() - t0)
    return by_cond


def run_overlap_experiment(cfg: ExperimentConfig, out, log=_print) -> Dict[str, List[dict]]:
    """Fixed-overlap nets trained on single tasks only; one run per (percent, seed)."""
    jobs = [{"kind": "overlap", "percent": p, "seed": s} for p in cfg.overlap.percents for s in cfg.run.seeds]
    return _run_training_sweep(cfg, jobs, out, log)


def run_regimen_experiment(cfg: ExperimentConfig, out, log=_print) -> Dict[str, List[dict]]:
    """Learnable-gate nets trained on a single/multitask mix; one run per (init, percent, seed)."""
    jobs = [
        {"kind": "regimen", "init": i, "percent": p, "seed": s}
        for i in cfg.regimen.init_scales
        for p in cfg.regimen.percents
        for s in cfg.run.seeds
    ]
    return _run_training_sweep(cfg, jobs, out, log)


# ---------------------------------------------------------------- meta-learner sweep


def meta_config(cfg: ExperimentConfig) -> MetaConfig:
    m = cfg.meta
    return MetaConfig(
        n_particles=m.particles,
        refit_every=m.refit_every,
        svgd_steps=m.svgd_steps,
        step_size=m.step_size,
        sigma_obs=m.sigma_obs,
        gamma=m.gamma,
    )


def _meta_env_net(cfg: ExperimentConfig, noise: float, repeat: int, cost: float = 0.0):
    env = build_environment(cfg.env.seed + repeat, cost=cost, noise_sd=noise)
    net = init_network(default_config(beta=cfg.train.beta), repeat)
    install_shared_init(net, None if cfg.meta.init_scale == "high" else net.beta)
    return env, net


def _meta_job(job: dict) -> dict:
    cfg = parse_config(job["config"])
    k, tau, lr = cfg.env.items, cfg.meta.tau, cfg.train.base_lr
    env, net = _meta_env_net(cfg, job["noise"], job["repeat"], job.get("cost", 0.0))
    execute = network_executor(net, env, k, lr)
    if job["policy"] == "meta":
        log = run_agent(execute, env.n_tasks, job["cost"], tau, meta_config(cfg), seed=job["repeat"])
    else:
        log = run_fixed(execute, env.n_tasks, 0.0, tau, job["policy"])
    return {"job": job, "log": log}


def run_meta_experiment(cfg: ExperimentConfig, out, log=_print, selftest_skipped: bool = False) -> dict:
    """Meta-learner against both fixed strategies, for every noise level, cost and repeat.

    Fixed-strategy runs do not depend on the cost (the network never sees
    it), so each is trained once per (noise, repeat) and the cost is applied
    to its raw rewards afterwards.
    """
    t0 = time.time()
    w = Writer(out)
    text = dump_config(cfg)
    repeats = range(cfg.meta.repeats)
    w.manifest(
        cfg,
        {
            "selftest_skipped": selftest_skipped,
            "environments": {
                str(r): environment_record(build_environment(cfg.env.seed + r)) for r in repeats
            },
        },
    )
    jobs = []
    for noise in cfg.meta.noise_sds:
        for r in repeats:
            for pol in (SINGLE, MULTI):
                jobs.append({"policy": pol, "noise": noise, "repeat": r})
            for c in cfg.meta.costs:
                jobs.append({"policy": "meta", "noise": noise, "repeat": r, "cost": c})
    for j in jobs:
        j["config"] = text

    fixed: Dict[tuple, object] = {}
    meta_runs: Dict[tuple, object] = {}
    for res in _map(_meta_job, jobs, cfg.run.workers):
        j, run = res["job"], res["log"]
        if j["policy"] == "meta":
            key = (j["noise"], j["cost"], j["repeat"])
            meta_runs[key] = run
            w.table(
                f"trials/noise{fmt(j['noise'])}_cost{fmt(j['cost'])}_rep{j['repeat']}.csv",
                ["trial", "strategy", "task", "raw_reward", "adjusted_reward"],
                run.rows(),
            )
            if cfg.meta.snapshots:
                w.jsonl(
                    f"snapshots/noise{fmt(j['noise'])}_cost{fmt(j['cost'])}_rep{j['repeat']}.jsonl",
                    run.snapshots,
                )
            log(f"meta noise {j['noise']} cost {j['cost']} repeat {j['repeat']}: "
                f"total {run.total_reward:.1f}, single {run.fraction_single:.2f}")
        else:
            fixed[(j["noise"], j["policy"], j["repeat"])] = run

    rows, totals = [], {}
    for noise in cfg.meta.noise_sds:
        for c in cfg.meta.costs:
            for r in repeats:
                m = meta_runs[(noise, c, r)]
                entries = [("meta", m.total_reward, m.fraction_single)]
                for pol in (SINGLE, MULTI):
                    raw = fixed[(noise, pol, r)].raw
                    entries.append(
                        ({SINGLE: "single", MULTI: "multi"}[pol],
                         float(apply_serialization_cost(raw, c, pol).sum()),
                         1.0 if pol == SINGLE else 0.0)
                    )
                for pol, total, frac in entries:
                    rows.append([fmt(noise), fmt(c), r, pol, total, frac])
                    totals.setdefault((noise, c, pol), []).append((total, frac))
    w.table("meta_totals.csv", ["noise_sd", "cost", "repeat", "policy", "total_reward", "fraction_single"], rows)

    frac_rows, summary = [], {}
    for noise in cfg.meta.noise_sds:
        for c in cfg.meta.costs:
            n, m, lo, hi = mean_ci([f for _, f in totals[(noise, c, "meta")]])
            frac_rows.append([fmt(noise), fmt(c), n, m, lo, hi])
            summary[(noise, c)] = {
                pol: float(np.mean([t for t, _ in totals[(noise, c, pol)]])) for pol in ("meta", "single", "multi")
            }
            summary[(noise, c)]["fraction_single"] = m
    w.table("fraction_single.csv", ["noise_sd", "cost", "n", "mean", "ci_low", "ci_high"], frac_rows)
    w.table(
        "summary.csv",
        ["noise_sd", "cost", "policy", "n", "mean_total", "ci_low", "ci_high"],
        (
            [fmt(noise), fmt(c), pol, *mean_ci([t for t, _ in totals[(noise, c, pol)]])]
            for noise in cfg.meta.noise_sds
            for c in cfg.meta.costs
            for pol in ("meta", "single", "multi")
        ),
    )
    w.finish(time.time() - t0)
    return {"summary": summary, "meta": meta_runs, "fixed": fixed}


def run_experiment(cfg: ExperimentConfig, out=None, log=_print, selftest_skipped: bool = False):
    out = out or cfg.run.out
    os.makedirs(out, exist_ok=True)
    kind = cfg.run.experiment
    if kind == "overlap":
        return run_overlap_experiment(cfg, out, log)
    if kind == "regimen":
        return run_regimen_experiment(cfg, out, log)
    if kind == "meta":
        return run_meta_experiment(cfg, out, log, selftest_skipped)
    raise ConfigurationError(f"experiment {kind!r} is not a batch sweep; use the selftest or gradcheck command")
