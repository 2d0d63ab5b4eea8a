"""Synthetic two-input, two-output task world.

Input 0 is a flat vector, input 1 a single-channel grid. Each input is a
gain-scaled mix of a few latent factors over fixed basis patterns (smooth
ones for the grid) plus a small residual. Labels are computed from the clean
input: a projection recovering the latent factors, shared by every task on
that input (so those tasks have common structure worth sharing), then a
task-specific readout and an argmax over the content classes. Class 0 is
reserved as the "no response" class and is never a task label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .network import ConfigurationError, InputError

RECORD_VERSION = 1

SINGLE = "S"
MULTI = "M"

_TRIAL_STREAM = 0
_EVAL_STREAM = 1
_NOISE_STREAM = 2
_BALANCE_ITEMS = 10_000


@dataclass(frozen=True)
class TaskSpec:
    task_id: int  # 1-based
    input_dim: int
    output_dim: int
    mapping_seed: int


@dataclass
class TrialBatch:
    stimuli: List[np.ndarray]
    labels: np.ndarray  # (K, n_tasks), class indices in 1..n_content
    clean_stimuli: List[np.ndarray]

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    def task_labels(self) -> dict:
        return {t: self.labels[:, t] for t in range(self.labels.shape[1])}


@dataclass
class Environment:
    seed: int
    cost: float
    noise_sd: float
    input_shapes: Tuple[Tuple[int, ...], ...]
    n_content: int
    tasks: Tuple[TaskSpec, ...]
    pairs: Tuple[Tuple[int, int], ...]  # 0-based task indices
    latent_dim: int
    bases: Tuple[np.ndarray, ...]  # per input: (latent_dim, input size), unit rows
    projections: Tuple[np.ndarray, ...]  # per input: (latent_dim, input size)
    readouts: Tuple[np.ndarray, ...]  # per task: (n_content, latent_dim)
    gain: float = 3.0
    residual: float = 0.1

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_classes(self) -> int:
        return self.n_content + 1

    @property
    def task_io(self) -> List[Tuple[int, int]]:
        return [(t.input_dim, t.output_dim) for t in self.tasks]

    def partner(self, task: int) -> int:
        for a, b in self.pairs:
            if task == a:
                return b
            if task == b:
                return a
        raise InputError(f"task {task + 1} has no multitask partner")

    def labels_for(self, clean: Sequence[np.ndarray]) -> np.ndarray:
        n = clean[0].shape[0]
        out = np.empty((n, self.n_tasks), dtype=np.int64)
        for t, spec in enumerate(self.tasks):
            x = clean[spec.input_dim].reshape(n, -1)
            scores = x @ self.projections[spec.input_dim].T @ self.readouts[t].T
            out[:, t] = 1 + scores.argmax(axis=1)
        return out


def _sample_inputs(env: Environment, rng: np.random.Generator, n: int) -> List[np.ndarray]:
    out = []
    for shape, basis in zip(env.input_shapes, env.bases):
        z = rng.standard_normal((n, env.latent_dim))
        x = env.gain * z @ basis + env.residual * rng.standard_normal((n, basis.shape[1]))
        out.append(x.reshape((n,) + tuple(shape)))
    return out


def _basis(rng: np.random.Generator, shape, latent_dim: int, smooth: float) -> np.ndarray:
    if len(shape) == 1:
        b = rng.standard_normal((latent_dim, shape[0]))
    else:
        b = np.stack(
            [gaussian_filter(rng.standard_normal(shape), smooth, mode="wrap").ravel() for _ in range(latent_dim)]
        )
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def build_environment(
    seed: int,
    cost: float = 0.0,
    noise_sd: float = 0.0,
    vector_size: int = 16,
    grid_size: int = 8,
    n_content: int = 8,
    latent_dim: int = 6,
    gain: float = 3.0,
    residual: float = 0.1,
    smooth: float = 1.5,
) -> Environment:
    if not 0.0 <= cost <= 1.0:
        raise ConfigurationError(f"serialization cost must lie in [0, 1], got {cost}")
    if noise_sd < 0:
        raise ConfigurationError(f"noise sd must be non-negative, got {noise_sd}")
    shapes = ((vector_size,), (1, grid_size, grid_size))
    # tasks 1..4 as (input, output): the compatible pairs {1,4} and {2,3}
    # use disjoint inputs and disjoint outputs
    io = [(0, 0), (0, 1), (1, 0), (1, 1)]
    pairs = ((0, 3), (1, 2))
    tasks = tuple(TaskSpec(t + 1, i, o, seed) for t, (i, o) in enumerate(io))
    rng = np.random.default_rng([seed, 7])
    # grid basis patterns are smoothed over space (channel dimension excluded)
    bases = tuple(_basis(rng, s if len(s) == 1 else s[1:], latent_dim, smooth) for s in shapes)
    # recovers the latent factors from a clean input (up to the residual)
    projections = tuple(np.linalg.pinv(b).T for b in bases)
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, 8, attempt])
        readouts = []
        for _ in io:
            q = rng.standard_normal((n_content, latent_dim))
            readouts.append(q / np.linalg.norm(q, axis=1, keepdims=True))
        env = Environment(
            seed, float(cost), float(noise_sd), shapes, n_content, tasks, pairs,
            latent_dim, bases, projections, tuple(readouts), float(gain), float(residual),
        )
        check = _sample_inputs(env, np.random.default_rng([seed, 99]), _BALANCE_ITEMS)
        freqs = class_frequencies(env, check)
        if freqs.min() >= 0.05 and freqs.max() <= 0.25:
            return env
        attempt += 1
        if attempt > 1000:
            raise ConfigurationError("could not build a class-balanced label mapping")


def class_frequencies(env: Environment, clean: Sequence[np.ndarray]) -> np.ndarray:
    """(n_tasks, n_content) fraction of items carrying each content class."""
    labels = env.labels_for(clean)
    return np.stack(
        [np.bincount(labels[:, t] - 1, minlength=env.n_content) / len(labels) for t in range(env.n_tasks)]
    )


def _make_batch(env: Environment, clean: List[np.ndarray], noise_rng) -> TrialBatch:
    labels = env.labels_for(clean)
    if env.noise_sd > 0:
        stimuli = [x + env.noise_sd * noise_rng.standard_normal(x.shape) for x in clean]
    else:
        stimuli = [x.copy() for x in clean]
    return TrialBatch(stimuli, labels, clean)


def generate_trial(env: Environment, trial_index: int, k: int) -> TrialBatch:
    """The ``k`` items of one trial; fully determined by (env seed, trial index)."""
    if k < 1:
        raise InputError(f"items per trial must be >= 1, got {k}")
    rng = np.random.default_rng([env.seed, _TRIAL_STREAM, trial_index])
    clean = _sample_inputs(env, rng, k)
    noise = np.random.default_rng([env.seed, _NOISE_STREAM, trial_index])
    return _make_batch(env, clean, noise)


def generate_eval_set(env: Environment, n: int = 1024) -> TrialBatch:
    """Held-out items from a stream reserved for evaluation."""
    rng = np.random.default_rng([env.seed, _EVAL_STREAM])
    clean = _sample_inputs(env, rng, n)
    noise = np.random.default_rng([env.seed, _NOISE_STREAM, _EVAL_STREAM, 0])
    return _make_batch(env, clean, noise)


def task_reward(predictions, truth) -> float:
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise InputError(f"prediction/label length mismatch: {predictions.shape} vs {truth.shape}")
    if predictions.size == 0:
        raise InputError("no items to score")
    return float(np.mean(predictions == truth))


def apply_serialization_cost(reward, cost: float, strategy: str):
    """Serial execution pays ``reward / (1 + cost)``; multitasking is exempt."""
    if strategy == SINGLE:
        return reward / (1.0 + cost)
    if strategy == MULTI:
        return reward
    raise ValueError(f"unknown strategy {strategy!r}")


def environment_record(env: Environment) -> str:
    """Versioned ``key = value`` summary of an environment, for manifests."""
    check = _sample_inputs(env, np.random.default_rng([env.seed, 99]), _BALANCE_ITEMS)
    counts = np.rint(class_frequencies(env, check) * _BALANCE_ITEMS).astype(int)
    lines = [
        f"record_version = {RECORD_VERSION}",
        f"seed = {env.seed}",
        f"cost = {env.cost!r}",
        f"noise_sd = {env.noise_sd!r}",
        f"input_shapes = {'; '.join('x'.join(map(str, s)) for s in env.input_shapes)}",
        f"n_classes = {env.n_classes}",
        f"pairs = {'; '.join(f'{a + 1}+{b + 1}' for a, b in env.pairs)}",
    ]
    for t in range(env.n_tasks):
        lines.append(f"class_counts.task{t + 1} = {', '.join(map(str, counts[t]))}")
    return "\n".join(lines) + "\n"
