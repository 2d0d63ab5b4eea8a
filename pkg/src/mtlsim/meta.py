"""Approximate-Bayesian choice between single-task and multitask training.

For every (strategy, task) the agent keeps a particle approximation to the
posterior over the parameters ``(w1, b1, w2, b2)`` of a nested-sigmoid
learning curve

    f(t) = sigmoid(w2 * sigmoid(w1 * t + b1) + b2)

where ``t`` counts how often the strategy has been chosen. Particles are
fitted with Stein variational gradient descent. Each trial one particle per
(strategy, task) is drawn, the discounted reward of committing to each
strategy for the rest of the horizon is predicted, and the larger wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist

from .environment import MULTI, SINGLE, apply_serialization_cost
from .network import NumericError

STRATEGIES = (SINGLE, MULTI)
PARAM_NAMES = ("w1", "b1", "w2", "b2")
PRIOR_MEAN = np.array([0.001, -2.0, 10.0, -5.0])
PRIOR_SD = np.array([0.2, 1.0, 1.0, 1.0])


@dataclass
class MetaConfig:
    n_particles: int = 5
    refit_every: int = 50
    svgd_steps: int = 200
    step_size: float = 0.05
    sigma_obs: float = 0.05
    gamma: float = 1.0
    prior_mean: Tuple[float, ...] = tuple(PRIOR_MEAN)
    prior_sd: Tuple[float, ...] = tuple(PRIOR_SD)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def reward_fn(theta, t):
    """Nested-sigmoid learning curve; ``theta[..., :]`` is (w1, b1, w2, b2)."""
    theta = np.asarray(theta, dtype=float)
    w1, b1, w2, b2 = np.moveaxis(theta, -1, 0)
    return _sigmoid(w2 * _sigmoid(w1 * t + b1) + b2)


def log_posterior(theta, counts, rewards, prior_mean=PRIOR_MEAN, prior_sd=PRIOR_SD, sigma_obs=0.05) -> float:
    theta = np.asarray(theta, dtype=float)
    lp = -0.5 * np.sum(((theta - prior_mean) / prior_sd) ** 2)
    if len(counts):
        resid = np.asarray(rewards) - reward_fn(theta, np.asarray(counts, dtype=float))
        lp -= 0.5 * np.sum(resid**2) / sigma_obs**2
    return float(lp)


def log_posterior_grad(
    theta, counts, rewards, prior_mean=PRIOR_MEAN, prior_sd=PRIOR_SD, sigma_obs=0.05
) -> np.ndarray:
    """Gradient of log prior + Gaussian log likelihood; ``theta`` may be (n, 4)."""
    theta = np.asarray(theta, dtype=float)
    prior_mean = np.asarray(prior_mean)
    prior_sd = np.asarray(prior_sd)
    grad = -(theta - prior_mean) / prior_sd**2
    counts = np.asarray(counts, dtype=float)
    if counts.size == 0:
        return grad
    rewards = np.asarray(rewards, dtype=float)
    w1, b1, w2, b2 = (theta[..., j, None] for j in range(4))
    s1 = _sigmoid(w1 * counts + b1)
    f = _sigmoid(w2 * s1 + b2)
    dv = (rewards - f) * f * (1.0 - f) / sigma_obs**2  # d loglik / d(outer pre-activation)
    du = dv * w2 * s1 * (1.0 - s1)
    lik = np.stack(
        [(du * counts).sum(-1), du.sum(-1), (dv * s1).sum(-1), dv.sum(-1)], axis=-1
    )
    return grad + lik


def rbf_bandwidth(z: np.ndarray) -> float:
    n = len(z)
    if n < 2:
        return 1.0
    med = np.median(pdist(z))
    if med == 0:
        return 1.0
    return med**2 / np.log(n + 1)


def svgd_fit(
    particles: np.ndarray,
    grad_logp: Callable[[np.ndarray], np.ndarray],
    steps: int,
    step_size: float,
    scale: Optional[np.ndarray] = None,
    fudge: float = 1e-6,
    alpha: float = 0.9,
) -> np.ndarray:
    """Transport ``particles`` (n, d) toward the target with SVGD.

    Works in coordinates divided by ``scale`` (typically the prior sd) so the
    kernel sees comparable units. Updates are scaled per coordinate by an
    AdaGrad-style running root-mean-square of past updates (decay ``alpha``)
    and the step size is annealed linearly to zero over ``steps``, so the
    particles settle instead of chattering around the fixed point. With a
    single particle this is plain (adaptive) gradient ascent.
    """
    x = np.array(particles, dtype=float)
    if x.ndim != 2:
        raise ValueError("particles must be a 2-d array (n, d)")
    if step_size == 0 or steps == 0:
        return x
    scale = np.ones(x.shape[1]) if scale is None else np.asarray(scale, dtype=float)
    z = x / scale
    n = len(z)
    hist = None
    for it in range(steps):
        g = grad_logp(z * scale) * scale
        diff = z[:, None, :] - z[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        h = rbf_bandwidth(z)
        k = np.exp(-sq / h)
        repulse = (2.0 / h) * (k.sum(axis=1)[:, None] * z - k @ z)
        phi = (k @ g + repulse) / n
        hist = phi**2 if hist is None else alpha * hist + (1.0 - alpha) * phi**2
        eps = step_size * (1.0 - it / steps)
        z = z + eps * phi / (fudge + np.sqrt(hist))
        if not np.all(np.isfinite(z)):
            raise NumericError(f"SVGD produced non-finite particles: {z * scale}")
    return z * scale


def predict_task_reward(theta, history: Sequence[str], strategy: str):
    """Reward for a task at the next trial if ``strategy`` is picked now."""
    count = sum(1 for a in history if a == strategy)
    return reward_fn(theta, count)


def predict_future_reward(
    thetas: np.ndarray, count: int, trial: int, tau: int, gamma: float = 1.0
) -> float:
    """Discounted reward from ``trial`` to ``tau`` when committing to one strategy.

    ``thetas`` holds one parameter vector per task; ``count`` is how often
    the strategy was chosen before ``trial``.
    """
    remaining = tau - trial + 1
    if remaining <= 0:
        return 0.0
    steps = np.arange(remaining)
    per_trial = reward_fn(np.asarray(thetas)[:, None, :], count + steps).sum(axis=0)
    if gamma == 1.0:
        return float(per_trial.sum())
    return float(np.dot(gamma**steps, per_trial))


@dataclass
class AgentState:
    n_tasks: int
    tau: int
    config: MetaConfig
    trial: int = 1
    counts: Dict[str, int] = field(default_factory=lambda: {a: 0 for a in STRATEGIES})
    # history[A][i] = list of (count at observation, reward)
    history: Dict[str, List[List[Tuple[int, float]]]] = field(default_factory=dict)
    particles: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    pending: Dict[str, List[int]] = field(default_factory=dict)
    refits: Dict[str, List[int]] = field(default_factory=dict)
    choices: List[str] = field(default_factory=list)


class MetaAgent:
    """Thompson-sampling agent over the two training strategies."""

    def __init__(self, n_tasks: int, tau: int, config: Optional[MetaConfig] = None, seed: int = 0):
        self.config = config or MetaConfig()
        if self.config.n_particles < 1:
            raise ValueError("need at least one particle")
        self.rng = np.random.default_rng(seed)
        self.prior_mean = np.asarray(self.config.prior_mean, dtype=float)
        self.prior_sd = np.asarray(self.config.prior_sd, dtype=float)
        self.snapshots: List[dict] = []
        s = AgentState(n_tasks, tau, self.config)
        for a in STRATEGIES:
            s.history[a] = [[] for _ in range(n_tasks)]
            s.pending[a] = [0] * n_tasks
            s.refits[a] = [0] * n_tasks
            s.particles[a] = []
            for i in range(n_tasks):
                init = self.prior_mean + self.prior_sd * self.rng.standard_normal(
                    (self.config.n_particles, 4)
                )
                s.particles[a].append(self._fit(init, []))
        self.state = s

    def _fit(self, particles, data):
        c = self.config
        counts = np.array([d[0] for d in data], dtype=float)
        rewards = np.array([d[1] for d in data], dtype=float)

        def grad(theta):
            return log_posterior_grad(theta, counts, rewards, self.prior_mean, self.prior_sd, c.sigma_obs)

        return svgd_fit(particles, grad, c.svgd_steps, c.step_size, scale=self.prior_sd)

    def future_rewards(self, thetas: Dict[str, np.ndarray]) -> Dict[str, float]:
        s = self.state
        return {
            a: predict_future_reward(thetas[a], s.counts[a], s.trial, s.tau, self.config.gamma)
            for a in STRATEGIES
        }

    def sample_parameters(self) -> Dict[str, np.ndarray]:
        s = self.state
        out = {}
        for a in STRATEGIES:
            idx = self.rng.integers(0, self.config.n_particles, size=s.n_tasks)
            out[a] = np.stack([s.particles[a][i][idx[i]] for i in range(s.n_tasks)])
        return out

    def select(self) -> str:
        """Thompson step: sample, predict committed future reward, take the argmax."""
        values = self.future_rewards(self.sample_parameters())
        if values[SINGLE] > values[MULTI]:
            return SINGLE
        if values[MULTI] > values[SINGLE]:
            return MULTI
        return STRATEGIES[int(self.rng.integers(0, 2))]

    def observe(self, strategy: str, rewards: Sequence[float]) -> None:
        s = self.state
        count = s.counts[strategy]
        for i, r in enumerate(rewards):
            s.history[strategy][i].append((count, float(r)))
            s.pending[strategy][i] += 1
            if s.pending[strategy][i] >= self.config.refit_every:
                s.particles[strategy][i] = self._fit(s.particles[strategy][i], s.history[strategy][i])
                s.pending[strategy][i] = 0
                s.refits[strategy][i] += 1
                self.snapshots.append(
                    {
                        "trial": s.trial,
                        "strategy": strategy,
                        "task": i + 1,
                        "observations": len(s.history[strategy][i]),
                        "particles": s.particles[strategy][i].tolist(),
                    }
                )
        s.counts[strategy] += 1
        s.choices.append(strategy)
        s.trial += 1


@dataclass
class RunLog:
    """Per-trial record of one run (agent or fixed strategy)."""

    strategies: List[str]
    raw: np.ndarray  # (trials, n_tasks)
    adjusted: np.ndarray
    snapshots: List[dict] = field(default_factory=list)
    refits: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def total_reward(self) -> float:
        return float(self.adjusted.sum())

    @property
    def fraction_single(self) -> float:
        return self.strategies.count(SINGLE) / max(len(self.strategies), 1)

    def rows(self):
        for t, a in enumerate(self.strategies):
            for i in range(self.raw.shape[1]):
                yield t + 1, a, i + 1, self.raw[t, i], self.adjusted[t, i]


Executor = Callable[[str, int], np.ndarray]


def run_agent(
    execute: Executor,
    n_tasks: int,
    cost: float,
    tau: int,
    config: Optional[MetaConfig] = None,
    seed: int = 0,
) -> RunLog:
    """Let the agent pick a strategy on each of ``tau`` trials.

    ``execute(strategy, trial_index)`` performs (and trains on) one trial
    and returns the raw per-task rewards; the serialization cost is applied
    here, and the agent only ever sees the adjusted rewards.
    """
    agent = MetaAgent(n_tasks, tau, config, seed)
    strategies, raw, adjusted = [], np.zeros((tau, n_tasks)), np.zeros((tau, n_tasks))
    for t in range(tau):
        a = agent.select()
        try:
            r = np.asarray(execute(a, t), dtype=float)
        except NumericError as exc:
            raise NumericError(f"trial {t + 1}: {exc}") from exc
        adj = apply_serialization_cost(r, cost, a)
        agent.observe(a, adj)
        strategies.append(a)
        raw[t], adjusted[t] = r, adj
    return RunLog(strategies, raw, adjusted, agent.snapshots, agent.state.refits)


def run_fixed(execute: Executor, n_tasks: int, cost: float, tau: int, strategy: str) -> RunLog:
    raw = np.zeros((tau, n_tasks))
    for t in range(tau):
        raw[t] = execute(strategy, t)
    return RunLog([strategy] * tau, raw, apply_serialization_cost(raw, cost, strategy))


def network_executor(net, env, k: int, base_lr: float = 0.1) -> Executor:
    """Executor that trains ``net`` on the environment's fixed item stream."""
    from .environment import generate_trial
    from .regimen import learning_rate, run_trial

    def execute(strategy: str, t: int) -> np.ndarray:
        return run_trial(net, generate_trial(env, t, k), env, learning_rate(t, base_lr), strategy)

    return execute


def agent_run(env, net, tau: int, config: Optional[MetaConfig] = None, seed: int = 0, k: int = 64) -> RunLog:
    return run_agent(network_executor(net, env, k), env.n_tasks, env.cost, tau, config, seed)
