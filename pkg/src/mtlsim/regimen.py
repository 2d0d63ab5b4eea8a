"""Single-task and multitask training protocols.

A single-task trial runs the four tasks one after another, each as its own
mini-batch; a multitask trial runs the compatible pairs, each pair as one
mini-batch with the summed loss. Accuracy is always recorded before the
update that uses the same data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .environment import MULTI, SINGLE, Environment, TrialBatch, generate_trial, task_reward
from .metrics import LearningCurve
from .network import (
    ConfigurationError,
    Network,
    backward,
    forward,
    loss,
    predict,
    sgd_step,
    task_vector,
)

GATE_MARGIN = 3.0
BASE_LR = 0.1
LR_DECAY_TRIALS = 2000.0


@dataclass(frozen=True)
class OverlapConfig:
    percent: float
    frozen: bool = True


def learning_rate(trial: int, base: float = BASE_LR, decay: float = LR_DECAY_TRIALS) -> float:
    return base / (1.0 + trial / decay)


def overlap_assignment(width: int, n_users: int, percent: float):
    """Unit indices per user: ``round(p% * width)`` shared, the rest split evenly."""
    if not 0 <= percent <= 100:
        raise ConfigurationError(f"overlap percent must lie in [0, 100], got {percent}")
    shared = int(round(percent / 100.0 * width))
    if n_users == 0:
        return []
    private = (width - shared) // n_users
    if shared < width and private == 0:
        raise ConfigurationError(
            f"width {width} too small to give {n_users} tasks private units at {percent}% overlap"
        )
    units = []
    for u in range(n_users):
        start = shared + u * private
        units.append(np.r_[np.arange(shared), np.arange(start, start + private)])
    return units


def install_overlap(net: Network, overlap: OverlapConfig) -> None:
    """Set task projections so that the tasks sharing a hidden layer overlap by ``percent``.

    Gates are driven to sigmoid(+3) on a task's units and sigmoid(-3)
    elsewhere. Output layers are switched fully on for the tasks that
    report through them and off for the rest.
    """
    cfg = net.config
    on = net.beta + GATE_MARGIN
    off = net.beta - GATE_MARGIN
    head_names = {h.name for h in cfg.heads}
    for spec in net.gated_layers():
        users = cfg.layer_tasks(spec.name)
        wt = np.full((spec.units, cfg.n_tasks), off)
        if spec.name in head_names:
            wt[:, users] = on
        else:
            for t, units in zip(users, overlap_assignment(spec.units, len(users), overlap.percent)):
                wt[units, t] = on
        key = f"{spec.name}.Wt"
        net.params[key] = wt
        net.frozen[key] = np.full(wt.shape, overlap.frozen)
    net.version += 1


def install_shared_init(net: Network, scale: Optional[float] = None) -> None:
    """Uniform, learnable task projections (default ``beta + 3``: every gate ~0.95)."""
    value = net.beta + GATE_MARGIN if scale is None else float(scale)
    for spec in net.gated_layers():
        key = f"{spec.name}.Wt"
        net.params[key] = np.full((spec.units, net.config.n_tasks), value)
        net.frozen[key] = np.zeros((spec.units, net.config.n_tasks), dtype=bool)
    net.version += 1


def _train_step(net: Network, batch: TrialBatch, tasks, lr: float):
    cfg = net.config
    fwd = forward(net, batch.stimuli, task_vector(cfg.n_tasks, tasks))
    accs = [task_reward(predict(fwd, cfg.task_io, t), batch.labels[:, t]) for t in tasks]
    _, dlogits = loss(fwd.logits, {t: batch.labels[:, t] for t in tasks}, tasks, cfg.task_io)
    if lr > 0:
        sgd_step(net, backward(net, fwd, dlogits), lr)
    return accs


def run_single_task_trial(net: Network, batch: TrialBatch, env: Environment, lr: float) -> np.ndarray:
    rewards = np.zeros(env.n_tasks)
    for t in range(env.n_tasks):
        rewards[t] = _train_step(net, batch, [t], lr)[0]
    return rewards


def run_multitask_trial(net: Network, batch: TrialBatch, env: Environment, lr: float) -> np.ndarray:
    rewards = np.zeros(env.n_tasks)
    for pair in env.pairs:
        rewards[list(pair)] = _train_step(net, batch, list(pair), lr)
    return rewards


def run_trial(net: Network, batch: TrialBatch, env: Environment, lr: float, strategy: str) -> np.ndarray:
    if strategy == SINGLE:
        return run_single_task_trial(net, batch, env, lr)
    if strategy == MULTI:
        return run_multitask_trial(net, batch, env, lr)
    raise ValueError(f"unknown strategy {strategy!r}")


def run_mixed_regimen(
    net: Network,
    env: Environment,
    trials: int,
    multitask_percent: float,
    seed: int,
    k: int = 64,
    base_lr: float = BASE_LR,
) -> LearningCurve:
    """Train for ``trials`` trials, multitasking on a Bernoulli(p/100) share of them.

    The item stream depends only on the environment seed and trial number,
    so every multitask percentage sees the same data in the same order.
    """
    if not 0 <= multitask_percent <= 100:
        raise ConfigurationError(f"multitask percent must lie in [0, 100], got {multitask_percent}")
    rng = np.random.default_rng(seed)
    draws = rng.random(trials) < multitask_percent / 100.0
    acc = np.zeros((trials, env.n_tasks))
    strategies = []
    for i in range(trials):
        strategy = MULTI if draws[i] else SINGLE
        batch = generate_trial(env, i, k)
        acc[i] = run_trial(net, batch, env, learning_rate(i, base_lr), strategy)
        strategies.append(strategy)
    return LearningCurve(np.arange(1, trials + 1), acc, strategies)
