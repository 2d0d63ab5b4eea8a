import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlsim.environment import MULTI, SINGLE
from mtlsim.meta import (
    PRIOR_MEAN,
    PRIOR_SD,
    MetaAgent,
    MetaConfig,
    log_posterior,
    log_posterior_grad,
    predict_future_reward,
    predict_task_reward,
    reward_fn,
    run_agent,
    run_fixed,
    svgd_fit,
)
from mtlsim.network import NumericError
from mtlsim.selftest import bandit_rate, conjugate_svgd


def _sig(x):
    return 1 / (1 + math.exp(-x))


# --- reward model ------------------------------------------------------------


def test_reward_fn_examples():
    assert reward_fn(np.zeros(4), 123.0) == 0.5
    assert reward_fn(PRIOR_MEAN, 0.0) == pytest.approx(_sig(10 * _sig(-2) - 5), abs=1e-12)
    assert reward_fn(PRIOR_MEAN, 0.0) == pytest.approx(0.0217, abs=1e-4)


@given(st.floats(0.001, 5), st.floats(-5, 5), st.floats(0.001, 20), st.floats(-10, 10))
def test_reward_fn_monotone_and_bounded(w1, b1, w2, b2):
    t = np.linspace(0, 5000, 50)
    f = reward_fn(np.array([w1, b1, w2, b2]), t)
    assert np.all(np.diff(f) >= -1e-15)
    assert np.all((f >= 0) & (f <= 1))


def test_grad_zero_at_prior_mode_and_at_exact_observation():
    assert np.allclose(log_posterior_grad(PRIOR_MEAN, [], []), 0)
    theta = PRIOR_MEAN + 0.3
    f = reward_fn(theta, 40.0)
    g_obs = log_posterior_grad(theta, [40.0], [f]) - log_posterior_grad(theta, [], [])
    assert np.allclose(g_obs, 0, atol=1e-12)


def _log_posterior_ld(theta, counts, rewards):
    """Long-double log posterior, an independent oracle for finite differences."""
    L = np.longdouble
    th, c, r = (np.asarray(a).astype(L) for a in (theta, counts, rewards))
    s = lambda x: 1 / (1 + np.exp(-x))
    f = s(th[2] * s(th[0] * c + th[1]) + th[3])
    prior = -0.5 * np.sum(((th - PRIOR_MEAN.astype(L)) / PRIOR_SD.astype(L)) ** 2)
    return prior - 0.5 * np.sum((r - f) ** 2) / L(0.05) ** 2


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_log_posterior_grad_finite_differences(seed):
    rng = np.random.default_rng(seed)
    theta = PRIOR_MEAN + PRIOR_SD * rng.standard_normal(4)
    counts = rng.integers(0, 2000, 30).astype(float)
    rewards = rng.random(30)
    g = log_posterior_grad(theta, counts, rewards)
    assert log_posterior(theta, counts, rewards) == pytest.approx(float(_log_posterior_ld(theta, counts, rewards)))
    # w1 multiplies counts, so its step shrinks by the count range
    steps = np.longdouble(1e-7) / np.array([counts.max(), 1, 1, 1], dtype=np.longdouble)
    th = theta.astype(np.longdouble)
    num = np.array(
        [(_log_posterior_ld(th + h * e, counts, rewards) - _log_posterior_ld(th - h * e, counts, rewards)) / (2 * h)
         for h, e in zip(steps, np.eye(4, dtype=np.longdouble))],
        dtype=float,
    )
    rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-2)
    assert rel.max() < 1e-5


# --- SVGD --------------------------------------------------------------------


def _prior_grad(theta):
    return log_posterior_grad(theta, [], [])


def test_svgd_empty_data_recovers_prior():
    rng = np.random.default_rng(0)
    x0 = PRIOR_MEAN + PRIOR_SD * rng.standard_normal((50, 4))
    x = svgd_fit(x0, _prior_grad, 500, 0.05, scale=PRIOR_SD)
    assert np.all(np.abs(x.mean(0) - PRIOR_MEAN) < 0.15)
    assert np.all(np.abs(x.std(0, ddof=1) / PRIOR_SD - 1) < 0.3)


def test_svgd_zero_step_identity():
    x0 = np.random.default_rng(0).standard_normal((5, 4))
    assert np.array_equal(svgd_fit(x0, _prior_grad, 100, 0.0), x0)


def test_svgd_single_particle_climbs_to_mode():
    x = svgd_fit(np.array([PRIOR_MEAN + 1.0]), _prior_grad, 2000, 0.05, scale=PRIOR_SD)
    assert np.allclose(x[0], PRIOR_MEAN, atol=1e-2)


def test_svgd_non_finite_raises():
    with pytest.raises(NumericError):
        svgd_fit(np.ones((3, 1)), lambda t: np.full_like(t, np.nan), 5, 0.1)


@pytest.mark.parametrize("n", [5, 50])
def test_svgd_conjugate_posterior(n):
    err, ratio = conjugate_svgd(n)
    assert abs(err) < 0.05
    assert abs(ratio - 1) < 0.3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_posterior_contracts_with_data(seed):
    """Incremental refits, as the agent uses them, narrow the curve-shape parameters."""
    true = np.array([0.002, -1.5, 9.0, -4.5])
    counts = np.arange(0, 4000, 20)
    rng = np.random.default_rng(seed)
    rewards = np.clip(reward_fn(true, counts) + 0.05 * rng.standard_normal(counts.size), 0, 1)
    agent = MetaAgent(1, 10_000, seed=seed)
    for c, r in zip(counts, rewards):
        agent.state.counts[SINGLE] = int(c)
        agent.observe(SINGLE, [r])
    sd = agent.state.particles[SINGLE][0].std(0, ddof=1)
    for j in (1, 2, 3):  # b1, w2, b2
        assert sd[j] < PRIOR_SD[j]


# --- predictions ---------------------------------------------------------------


def test_predict_task_reward_counting():
    theta = np.array([0.5, -1.0, 4.0, -2.0])
    assert predict_task_reward(theta, [], SINGLE) == reward_fn(theta, 0)
    assert predict_task_reward(theta, [SINGLE, MULTI, SINGLE], SINGLE) == reward_fn(theta, 2)
    hist = list(np.random.default_rng(0).choice([SINGLE, MULTI], 40))
    for i in range(len(hist)):
        replay = 0
        for a in hist[:i]:
            replay += a == MULTI
        assert predict_task_reward(theta, hist[:i], MULTI) == reward_fn(theta, replay)


def test_future_reward_examples():
    flat = np.tile([0.0, 0.0, 0.0, 0.0], (4, 1))  # f = 0.5 everywhere
    assert predict_future_reward(flat, 0, trial=91, tau=100) == pytest.approx(20.0)
    assert predict_future_reward(flat, 0, trial=101, tau=100) == 0.0
    one = np.array([[0.0, 0.0, 0.0, 1e3]])  # f = 1
    assert predict_future_reward(one, 0, 1, 100, gamma=0.99) == pytest.approx((1 - 0.99**100) / 0.01, rel=1e-9)
    assert predict_future_reward(one, 0, 1, 100, gamma=0.99) == pytest.approx(63.40, abs=0.01)


def test_future_reward_advances_count():
    theta = np.array([[0.3, -2.0, 5.0, -1.0]])
    brute = sum(reward_fn(theta[0], 7 + s) for s in range(5))
    assert predict_future_reward(theta, 7, 96, 100) == pytest.approx(brute)


# --- Thompson selection ----------------------------------------------------------


def test_dominating_particles_always_single():
    agent = MetaAgent(4, 100, seed=0)
    hi = np.tile([0.0, 0.0, 0.0, 8.0], (5, 1))
    lo = np.tile([0.0, 0.0, 0.0, -8.0], (5, 1))
    for i in range(4):
        agent.state.particles[SINGLE][i] = hi + 0.01 * np.arange(5)[:, None]
        agent.state.particles[MULTI][i] = lo
    assert all(agent.select() == SINGLE for _ in range(200))


def test_identical_particles_split_evenly():
    agent = MetaAgent(4, 100, seed=3)
    for i in range(4):
        agent.state.particles[MULTI][i] = agent.state.particles[SINGLE][i].copy()
    picks = [agent.select() for _ in range(1000)]
    assert abs(picks.count(SINGLE) / 1000 - 0.5) < 0.05


def test_bandit_selftest_small():
    assert np.mean([bandit_rate(s) for s in range(4)]) > 0.9


def test_early_exploration_tries_both():
    ok = 0
    for seed in range(200):
        agent = MetaAgent(1, 500, seed=seed)
        picks = set()
        for _ in range(50):
            a = agent.select()
            picks.add(a)
            agent.observe(a, [0.5])
        ok += picks == {SINGLE, MULTI}
    assert ok / 200 > 0.99


# --- agent runs -----------------------------------------------------------------


def test_degenerate_serial_arm_abandoned():
    log = run_agent(lambda a, t: np.full(4, 0.0 if a == SINGLE else 0.7), 4, 0.0, 1500, seed=0)
    assert log.strategies[-1000:].count(MULTI) / 1000 > 0.95


def test_identical_streams_match_pure_strategies():
    ex = lambda a, t: np.full(2, 0.9 * (1 - math.exp(-t / 50)))
    meta = run_agent(ex, 2, 0.0, 300, seed=1)
    pure = run_fixed(ex, 2, 0.0, 300, SINGLE)
    assert meta.total_reward == pytest.approx(pure.total_reward)


def test_refit_cadence_and_determinism():
    ex = lambda a, t: np.array([0.3, 0.6, 0.9])
    cfg = MetaConfig(svgd_steps=20)
    a = run_agent(ex, 3, 0.5, 260, cfg, seed=5)
    b = run_agent(ex, 3, 0.5, 260, cfg, seed=5)
    assert a.strategies == b.strategies and a.total_reward == b.total_reward
    n = {s: a.strategies.count(s) for s in (SINGLE, MULTI)}
    for s in (SINGLE, MULTI):
        assert a.refits[s] == [n[s] // 50] * 3
    assert len(a.snapshots) == sum(n[s] // 50 for s in n) * 3


def test_history_is_cost_adjusted_and_counts_ordered():
    agent = MetaAgent(2, 50, seed=0)
    log = run_agent(lambda a, t: np.array([0.8, 0.4]), 2, 1.0, 30, MetaConfig(svgd_steps=10), seed=0)
    s_rows = [r for r in log.rows() if r[1] == SINGLE]
    assert all(r[4] == pytest.approx(r[3] / 2) for r in s_rows)
    for a in (SINGLE, MULTI):
        for hist in agent.state.history[a]:
            counts = [c for c, _ in hist]
            assert counts == sorted(counts)


def test_numeric_error_reports_trial():
    def bad(a, t):
        if t == 3:
            raise NumericError("boom")
        return np.ones(1)

    with pytest.raises(NumericError, match="trial 4"):
        run_agent(bad, 1, 0.0, 10, MetaConfig(svgd_steps=5), seed=0)
