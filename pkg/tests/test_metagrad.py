import numpy as np
import pytest

from ope_hessian import taylor2 as t2
from ope_hessian.estimators import EstimatorConfig, build_critic, dr_derivatives_analytic
from ope_hessian.mdp import TabularMdp, generate_random_mdp, make_goal_bandit, sample_trajectories, softmax
from ope_hessian.metagrad import (
    MetaConfig,
    exact_meta_gradient,
    inner_update,
    meta_gradient_estimate,
    meta_objective,
    meta_train_demo,
    plugin_bias_probe,
    policy_gradient_estimate,
    records_to_csv,
    task_rng,
)
from ope_hessian.oracle import exact_value_dp


@pytest.fixture
def meta_mdp():
    return generate_random_mdp(2, 2, dirichlet_alpha=1.0, gamma=0.9, horizon=3, seed=1, num_goals=2)


def _theta(seed=0, shape=(2, 2)):
    return np.random.default_rng(seed).normal(size=shape)


def test_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(eta=-1.0)
    with pytest.raises(ValueError):
        MetaConfig(num_tasks=0)
    with pytest.raises(ValueError):
        MetaConfig(trajectories_per_task=0)
    with pytest.raises(ValueError):
        MetaConfig(inner_mode="magic")


def test_zero_step_keeps_theta(meta_mdp):
    theta = _theta()
    trs = sample_trajectories(meta_mdp, softmax(theta), 5, np.random.default_rng(0), goal=0)
    theta_prime, est = inner_update(theta, meta_mdp, 0, trs, MetaConfig(eta=0.0))
    assert np.array_equal(theta_prime, theta)
    assert isinstance(est, t2.Taylor2)


def test_zero_reward_task_keeps_theta(meta_mdp):
    mdp = TabularMdp(meta_mdp.transitions, np.zeros((2, 2)), 0.9, 3, 0)
    theta = _theta(1)
    trs = sample_trajectories(mdp, softmax(theta), 5, np.random.default_rng(0))
    cfg = MetaConfig(eta=0.5, inner_estimator=EstimatorConfig(kind="dr", critic="zero"))
    theta_prime, _ = inner_update(theta, mdp, None, trs, cfg)
    assert np.array_equal(theta_prime, theta)


def test_inner_gradient_matches_analytic_dr(meta_mdp):
    theta = _theta(2)
    trs = sample_trajectories(meta_mdp, softmax(theta), 8, np.random.default_rng(3), goal=1)
    _, est = inner_update(theta, meta_mdp, 1, trs, MetaConfig(eta=0.1))
    critic = build_critic("exact-q-mu", meta_mdp, softmax(theta), theta, goal=1)
    grads = [dr_derivatives_analytic(tr, theta, meta_mdp.gamma, critic)[1] for tr in trs]
    assert np.max(np.abs(est.grad - np.mean(grads, axis=0))) < 1e-10


def test_eta_zero_gives_outer_policy_gradient(meta_mdp):
    theta = _theta(3)
    cfg = MetaConfig(eta=0.0, trajectories_per_task=6, seed=5)
    out = meta_gradient_estimate(theta, [0], meta_mdp, cfg)
    rng = task_rng(5, 0)
    sample_trajectories(meta_mdp, softmax(theta), 6, rng, 0)  # inner batch
    fresh = sample_trajectories(meta_mdp, softmax(theta), 6, rng, 0)
    assert np.array_equal(out, policy_gradient_estimate(meta_mdp, theta, 0, fresh))


def test_policy_gradient_unbiased(meta_mdp):
    theta = _theta(4)
    trs = sample_trajectories(meta_mdp, softmax(theta), 20_000, np.random.default_rng(1), 0)
    per = np.array([policy_gradient_estimate(meta_mdp, theta, 0, [tr]) for tr in trs[:2000]])
    est = policy_gradient_estimate(meta_mdp, theta, 0, trs)
    se = per.std(axis=0, ddof=1) / np.sqrt(len(trs))
    assert np.all(np.abs(est - exact_value_dp(meta_mdp, theta, 0).grad) <= 4 * se + 1e-12)


def test_exact_meta_gradient_matches_finite_differences(meta_mdp):
    theta = _theta(5)
    eta = 0.4
    g = exact_meta_gradient(theta, meta_mdp, 0, eta)
    h = 1e-5
    flat = theta.ravel()
    fd = np.array([
        (meta_objective((flat + h * e).reshape(theta.shape), meta_mdp, 0, eta)
         - meta_objective((flat - h * e).reshape(theta.shape), meta_mdp, 0, eta)) / (2 * h)
        for e in np.eye(flat.size)
    ])
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_hvp_route_matches_explicit_matrix(meta_mdp):
    theta = _theta(6)
    trs = sample_trajectories(meta_mdp, softmax(theta), 10, np.random.default_rng(2), 0)
    _, est = inner_update(theta, meta_mdp, 0, trs, MetaConfig(eta=0.3))
    v = np.random.default_rng(3).normal(size=4)
    explicit = (np.eye(4) + 0.3 * est.hess) @ v
    assert np.max(np.abs(v + 0.3 * t2.hvp(est, v) - explicit)) < 1e-12


def test_meta_gradient_deterministic(meta_mdp):
    theta = _theta(7)
    cfg = MetaConfig(eta=0.2, num_tasks=3, trajectories_per_task=5, seed=9)
    a = meta_gradient_estimate(theta, [0, 1, 0], meta_mdp, cfg)
    b = meta_gradient_estimate(theta, [0, 1, 0], meta_mdp, cfg)
    assert np.array_equal(a, b)
    c = meta_gradient_estimate(theta, [0, 1, 0], meta_mdp, cfg, stream=(1,))
    assert not np.array_equal(a, c)


def test_meta_gradient_is_task_mean(meta_mdp):
    theta = _theta(8)
    cfg = MetaConfig(eta=0.2, trajectories_per_task=4, seed=2)
    both = meta_gradient_estimate(theta, [0, 1], meta_mdp, cfg)
    # task i uses substream (seed, i); rebuild each task alone with the same keys
    first = meta_gradient_estimate(theta, [0], meta_mdp, cfg)
    from ope_hessian.metagrad import _task_meta_gradient

    second = _task_meta_gradient(theta, meta_mdp, 1, cfg, task_rng(2, 1))
    assert np.allclose(both, 0.5 * (first + second), atol=1e-15)


# ---------- plug-in bias ----------

BANDIT = TabularMdp(np.ones((1, 3, 1)), np.array([[1.0, 0.0, 0.3]]), 0.9, 1, 0)
NOISY = EstimatorConfig(kind="dr", critic="zero")


def test_plugin_bias_shrinks_with_batch_size():
    cfg = MetaConfig(eta=2.0, seed=1, inner_estimator=NOISY)
    small = plugin_bias_probe(BANDIT, np.zeros((1, 3)), cfg, [1], 1500)[0]
    large = plugin_bias_probe(BANDIT, np.zeros((1, 3)), cfg, [4096], 40)[0]
    assert small["bias_norm"] > 3 * small["stderr_norm"]
    assert large["bias_norm"] < 3 * max(large["stderr_norm"], 1e-12)
    assert small["bias_norm"] > large["bias_norm"]


def test_exact_inner_update_removes_bias():
    cfg = MetaConfig(eta=2.0, seed=1, inner_estimator=NOISY, inner_mode="exact")
    row = plugin_bias_probe(BANDIT, np.zeros((1, 3)), cfg, [1], 1500)[0]
    assert row["bias_norm"] < 3 * row["stderr_norm"]
    assert row["num_reps"] == 1500 and row["B"] == 1


# ---------- demo ----------

def test_demo_frozen_outer_loop():
    mdp = make_goal_bandit(num_actions=3, num_goals=2)
    recs = meta_train_demo(mdp, MetaConfig(eta=0.5, alpha=0.0, num_tasks=2, trajectories_per_task=5), 5)
    assert len(recs) == 6
    assert len({r["post_value"] for r in recs}) == 1


def test_demo_improves_post_adaptation_value():
    mdp = make_goal_bandit(num_actions=3, num_goals=2)
    cfg = MetaConfig(eta=0.5, alpha=0.5, num_tasks=2, trajectories_per_task=20, seed=0)
    recs = meta_train_demo(mdp, cfg, 200)
    assert recs[200]["post_value"] > recs[0]["post_value"]
    text = records_to_csv(recs)
    assert text.splitlines()[0] == "iteration,pre_value,post_value,grad_norm"
    assert len(text.splitlines()) == 202


def test_demo_single_goal_no_adaptation_is_policy_gradient_ascent():
    mdp = make_goal_bandit(num_actions=3, num_goals=1)
    cfg = MetaConfig(eta=0.0, alpha=0.5, num_tasks=1, trajectories_per_task=50, seed=3)
    recs = meta_train_demo(mdp, cfg, 30)
    vals = [r["pre_value"] for r in recs]
    assert all(abs(r["pre_value"] - r["post_value"]) < 1e-15 for r in recs)
    assert vals[-1] > vals[0] + 0.2


def test_demo_needs_goals(meta_mdp):
    plain = TabularMdp(meta_mdp.transitions, np.zeros((2, 2)), 0.9, 3, 0)
    with pytest.raises(ValueError):
        meta_train_demo(plain, MetaConfig(), 1)
