"""Experiment configuration as a flat ``section.key = value`` text file.

Example::

    run.experiment = meta
    run.seeds = 0, 1, 2
    meta.tau = 5000
    meta.costs = 0.0, 0.5, 1.0

Lists are comma separated; blank lines and ``#`` comments are ignored.
Every field round-trips through :func:`dump_config` / :func:`parse_config`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, get_args, get_origin, get_type_hints

from .network import ConfigurationError

EXPERIMENTS = ("overlap", "regimen", "meta", "svgd-selftest", "gradient-check")


@dataclass
class RunSection:
    experiment: str = "overlap"
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    workers: int = 1
    out: str = "results"
    skip_selftest: bool = False


@dataclass
class EnvSection:
    seed: int = 0
    items: int = 160
    noise_sd: float = 0.0


@dataclass
class TrainSection:
    trials: int = 20000
    base_lr: float = 0.1
    beta: float = 3.0


@dataclass
class OverlapSection:
    percents: List[float] = field(default_factory=lambda: [0.0, 50.0, 100.0])


@dataclass
class RegimenSection:
    percents: List[float] = field(default_factory=lambda: [0.0, 30.0, 60.0, 90.0])
    init_scales: List[str] = field(default_factory=lambda: ["high"])


@dataclass
class MetaSection:
    tau: int = 5000
    repeats: int = 15
    costs: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    noise_sds: List[float] = field(default_factory=lambda: [0.0, 0.5])
    gamma: float = 1.0
    particles: int = 5
    refit_every: int = 50
    svgd_steps: int = 200
    step_size: float = 0.05
    sigma_obs: float = 0.05
    init_scale: str = "low"
    snapshots: bool = True


@dataclass
class MetricsSection:
    eval_items: int = 1024
    threshold: float = 0.9
    window: int = 50


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSection = field(default_factory=EnvSection)
    train: TrainSection = field(default_factory=TrainSection)
    overlap: OverlapSection = field(default_factory=OverlapSection)
    regimen: RegimenSection = field(default_factory=RegimenSection)
    meta: MetaSection = field(default_factory=MetaSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)


QUICK = {
    "run.seeds": [0, 1, 2, 3, 4],
    "env.items": 64,
    "train.trials": 2000,
    "meta.tau": 2000,
    "meta.repeats": 10,
    "meta.noise_sds": [0.0],
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _convert(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if get_origin(typ) in (list, List):
            (inner,) = get_args(typ)
            return [] if raw == "" else [_convert(v, inner, key) for v in raw.split(",")]
        if typ is bool:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _section_types(cfg: ExperimentConfig):
    for sec in dataclasses.fields(cfg):
        obj = getattr(cfg, sec.name)
        hints = get_type_hints(type(obj))
        for f in dataclasses.fields(obj):
            yield f"{sec.name}.{f.name}", obj, f.name, hints[f.name]


def set_value(cfg: ExperimentConfig, key: str, value) -> None:
    for k, obj, name, typ in _section_types(cfg):
        if k == key:
            if isinstance(value, str):
                value = _convert(value, typ, key)
            setattr(obj, name, value)
            return
    raise ConfigurationError(f"unknown config key {key!r}")


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(getattr(obj, name))}\n" for k, obj, name, _ in _section_types(cfg))


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_into(text, copy_config(base) if base else ExperimentConfig())


def parse_into(text: str, cfg: ExperimentConfig) -> ExperimentConfig:
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        set_value(cfg, key, value)
    validate(cfg)
    return cfg


def copy_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return parse_into(dump_config(cfg), ExperimentConfig())


def apply_quick(cfg: ExperimentConfig) -> ExperimentConfig:
    for k, v in QUICK.items():
        set_value(cfg, k, list(v) if isinstance(v, list) else v)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.run.experiment not in EXPERIMENTS:
        raise ConfigurationError(f"run.experiment: must be one of {', '.join(EXPERIMENTS)}")
    if not cfg.run.seeds:
        raise ConfigurationError("run.seeds: need at least one seed")
    if any(s < 0 for s in cfg.run.seeds) or cfg.env.seed < 0:
        raise ConfigurationError("seeds must be non-negative")
    if cfg.run.workers < 1:
        raise ConfigurationError("run.workers: must be >= 1")
    if cfg.env.items < 1:
        raise ConfigurationError("env.items: must be >= 1")
    if cfg.env.noise_sd < 0 or any(s < 0 for s in cfg.meta.noise_sds):
        raise ConfigurationError("noise sd must be non-negative")
    if cfg.train.trials < 1 or cfg.meta.tau < 1:
        raise ConfigurationError("train.trials / meta.tau: must be >= 1")
    if cfg.train.base_lr < 0:
        raise ConfigurationError("train.base_lr: must be non-negative")
    if not cfg.train.beta > 0:
        raise ConfigurationError("train.beta: must be positive")
    if not cfg.meta.costs:
        raise ConfigurationError("meta.costs: need at least one cost")
    if any(not 0 <= c <= 1 for c in cfg.meta.costs):
        raise ConfigurationError("meta.costs: every cost must lie in [0, 1]")
    if cfg.meta.repeats < 1 or cfg.meta.particles < 1 or cfg.meta.refit_every < 1:
        raise ConfigurationError("meta.repeats / meta.particles / meta.refit_every: must be >= 1")
    if not 0 < cfg.meta.gamma <= 1:
        raise ConfigurationError("meta.gamma: must lie in (0, 1]")
    if any(not 0 <= p <= 100 for p in cfg.overlap.percents + cfg.regimen.percents):
        raise ConfigurationError("percentages must lie in [0, 100]")
    if not cfg.regimen.init_scales or any(s not in ("high", "low") for s in cfg.regimen.init_scales):
        raise ConfigurationError("regimen.init_scales: entries must be 'high' or 'low'")
    if cfg.meta.init_scale not in ("high", "low"):
        raise ConfigurationError("meta.init_scale: must be 'high' or 'low'")
    if not 0 < cfg.metrics.threshold < 1:
        raise ConfigurationError("metrics.threshold: must lie in (0, 1)")
    if cfg.metrics.window < 1 or cfg.metrics.eval_items < 1:
        raise ConfigurationError("metrics.window / metrics.eval_items: must be >= 1")
