"""Built-in numerical self-tests and the pass marker that gates meta runs."""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List

import numpy as np

from .environment import MULTI, SINGLE, apply_serialization_cost
from .gradcheck import run_gradient_checks
from .meta import MetaConfig, PRIOR_MEAN, log_posterior, log_posterior_grad, reward_fn, run_agent, svgd_fit

GRAD_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def conjugate_svgd(n_particles: int, seed: int = 0, steps: int = 2000, step_size: float = 0.05):
    """SVGD on a Normal mean with a Normal prior, against the closed-form posterior.

    Returns (mean error in posterior sds, particle variance / posterior variance).
    The particle variance uses ddof=1.
    """
    rng = np.random.default_rng(seed)
    m0, s0, sigma = 0.0, 1.0, 0.5
    y = rng.normal(1.0, sigma, 20)
    post_var = 1.0 / (1.0 / s0**2 + len(y) / sigma**2)
    post_mean = post_var * (m0 / s0**2 + y.sum() / sigma**2)

    def grad(th):
        return -(th - m0) / s0**2 + (y[None, :] - th).sum(axis=1, keepdims=True) / sigma**2

    x = svgd_fit(rng.normal(m0, s0, (n_particles, 1)), grad, steps, step_size, scale=np.array([s0]))
    err = (x.mean() - post_mean) / np.sqrt(post_var)
    ratio = x.var(ddof=1) / post_var if n_particles > 1 else float("nan")
    return float(err), float(ratio)


def bandit_rate(seed: int, trials: int = 500, p_good: float = 0.8, p_bad: float = 0.2, config=None) -> float:
    """Share of the final 100 trials on which the agent picks the better Bernoulli arm."""
    rng = np.random.default_rng(1000 + seed)
    good = SINGLE if seed % 2 == 0 else MULTI

    def execute(strategy, t):
        p = p_good if strategy == good else p_bad
        return np.array([float(rng.random() < p)])

    log = run_agent(execute, 1, 0.0, trials, config or MetaConfig(), seed)
    last = log.strategies[-100:]
    return sum(a == good for a in last) / len(last)


def cost_model_sweep(n: int = 1000, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(n):
        r = rng.random(int(rng.integers(1, 9)))
        c = rng.random()
        if not np.array_equal(apply_serialization_cost(r, c, MULTI), r):
            return False
        if not np.allclose(apply_serialization_cost(r, c, SINGLE) * (1 + c), r):
            return False
    r = rng.random(4)
    return bool(np.array_equal(apply_serialization_cost(r, 1.0, SINGLE), r / 2))


def reward_model_checks() -> bool:
    """Prior-mean curve rises from near zero to near one; analytic gradient matches a difference."""
    t = np.array([0.0, 1e4])
    f = reward_fn(PRIOR_MEAN, t)
    if not (f[0] < 0.05 and f[1] > 0.95):
        return False
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 3000, 40).astype(float)
    rewards = rng.random(40)
    theta = PRIOR_MEAN + 0.1 * rng.standard_normal(4)
    g = log_posterior_grad(theta[None, :], counts, rewards)[0]
    h = 1e-6
    num = np.array(
        [
            (log_posterior(theta + h * e, counts, rewards) - log_posterior(theta - h * e, counts, rewards)) / (2 * h)
            for e in np.eye(4)
        ]
    )
    return bool(np.allclose(g, num, rtol=1e-4, atol=1e-3))


def _timed(name: str, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.time()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.time() - t0)


def run_selftests(quick: bool = False) -> List[CheckResult]:
    out = []

    def grads():
        res = run_gradient_checks(5 if quick else 20)
        worst = max(r.max_rel_error for r in res)
        return worst < GRAD_TOLERANCE, f"max relative error {worst:.2e} over {len(res)} nets (expected < {GRAD_TOLERANCE:g})"

    def conj():
        errs = [conjugate_svgd(n) for n in (5, 50)]
        ok = all(abs(e) < 0.05 and abs(v - 1) < 0.3 for e, v in errs)
        detail = "; ".join(f"n={n}: mean err {e:+.3f} sd, var ratio {v:.2f}" for n, (e, v) in zip((5, 50), errs))
        return ok, detail + " (expected |err| < 0.05, ratio within 0.7..1.3)"

    def bandit():
        rates = [bandit_rate(s) for s in range(5 if quick else 20)]
        return np.mean(rates) > 0.9, f"better arm chosen {np.mean(rates):.3f} of final trials (expected > 0.9)"

    out.append(_timed("gradient", grads))
    out.append(_timed("svgd-conjugate", conj))
    out.append(_timed("bandit", bandit))
    out.append(_timed("serialization-cost", lambda: (cost_model_sweep(), "1000-case sweep (expected serial r/(1+c), multitask unchanged)")))
    out.append(_timed("reward-model", lambda: (reward_model_checks(), "shape and gradient (expected f(0) < 0.05, f(1e4) > 0.95, gradient within 1e-4)")))
    return out


# ---------------------------------------------------------------- pass marker


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def cache_dir() -> Path:
    return Path(os.environ.get("MTLSIM_CACHE_DIR", Path.home() / ".cache" / "mtlsim"))


def marker_path() -> Path:
    return cache_dir() / f"selftest-{source_hash()}.ok"


def write_marker(results: List[CheckResult]) -> Path:
    p = marker_path()
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("".join(f"{r.name} {r.detail}\n" for r in results))
    return p


def has_marker() -> bool:
    return marker_path().exists()
