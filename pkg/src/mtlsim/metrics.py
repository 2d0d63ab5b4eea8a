"""Sharing and interference measurements on trained networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .environment import Environment, TrialBatch, task_reward
from .network import InputError, Network, forward, predict, task_vector


@dataclass
class LearningCurve:
    """Pre-update accuracy per trial and task.

    ``trials`` are 1-based trial numbers; ``accuracy`` has shape
    ``(n_trials, n_tasks)``; ``strategies`` records "S" or "M" per trial.
    """

    trials: np.ndarray
    accuracy: np.ndarray
    strategies: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=int)
        self.accuracy = np.asarray(self.accuracy, dtype=float)
        if len(self.trials) > 1 and np.any(np.diff(self.trials) <= 0):
            raise InputError("trial numbers must be strictly increasing")
        if self.accuracy.size and (self.accuracy.min() < 0 or self.accuracy.max() > 1):
            raise InputError("accuracies must lie in [0, 1]")


def mean_representation(net: Network, eval_set: TrialBatch, task: int, layer: str) -> np.ndarray:
    """Mean post-activation at ``layer`` over the set, executing ``task`` alone."""
    if eval_set.size == 0:
        raise InputError("evaluation set is empty")
    fwd = forward(net, eval_set.stimuli, task_vector(net.config.n_tasks, [task]))
    return fwd.activation(layer).mean(axis=0)


def representation_correlation(a, b) -> Optional[float]:
    """Pearson r between two representations; ``None`` when undefined."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InputError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise InputError("need at least two entries")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        return None
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def single_task_accuracy(net: Network, eval_set: TrialBatch, task: int) -> float:
    fwd = forward(net, eval_set.stimuli, task_vector(net.config.n_tasks, [task]))
    return task_reward(predict(fwd, net.config.task_io, task), eval_set.labels[:, task])


def paired_accuracy(net: Network, eval_set: TrialBatch, task: int, env: Environment) -> float:
    pair = [task, env.partner(task)]
    fwd = forward(net, eval_set.stimuli, task_vector(net.config.n_tasks, pair))
    return task_reward(predict(fwd, net.config.task_io, task), eval_set.labels[:, task])


def multitask_error(net: Network, eval_set: TrialBatch, task: int, env: Environment) -> float:
    """Accuracy lost by running ``task`` together with its partner."""
    return single_task_accuracy(net, eval_set, task) - paired_accuracy(net, eval_set, task, env)


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over full windows; entry i covers x[i : i + window]."""
    c = np.cumsum(np.concatenate([[0.0], np.asarray(x, dtype=float)]))
    return (c[window:] - c[:-window]) / window


def trials_to_threshold(
    curve: LearningCurve, task: int, threshold: float = 0.9, window: int = 50
) -> Optional[int]:
    """First trial at which the trailing ``window``-trial mean reaches ``threshold``."""
    if not 0 < threshold < 1:
        raise InputError(f"threshold must lie in (0, 1), got {threshold}")
    acc = curve.accuracy[:, task]
    if len(acc) < window:
        return None
    ma = moving_average(acc, window)
    hits = np.flatnonzero(ma >= threshold)
    if hits.size == 0:
        return None
    return int(curve.trials[hits[0] + window - 1])
