import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ope_hessian.mdp import (
    PROB_FLOOR,
    TabularMdp,
    generate_random_mdp,
    l1_distance,
    log_policy_derivatives,
    make_goal_bandit,
    make_offpolicy_pair,
    policy_probs,
    policy_probs_taylor2,
    sample_trajectories,
    sample_trajectory,
    softmax,
    state_occupancy,
)


def test_full_scale_generation_rows_normalised():
    mdp = generate_random_mdp(10, 5, dirichlet_alpha=0.001, gamma=0.8, horizon=20, seed=3)
    assert mdp.transitions.shape == (10, 5, 10)
    assert np.all(mdp.transitions >= 0)
    assert np.max(np.abs(mdp.transitions.sum(axis=2) - 1.0)) <= 1e-12
    assert np.all((mdp.rewards >= 0) & (mdp.rewards <= 1))


def test_single_state_single_action():
    mdp = generate_random_mdp(1, 1, dirichlet_alpha=0.5, seed=0)
    assert mdp.transitions[0, 0, 0] == 1.0


def test_generation_is_deterministic():
    a = generate_random_mdp(4, 3, seed=11)
    b = generate_random_mdp(4, 3, seed=11)
    assert np.array_equal(a.transitions, b.transitions) and np.array_equal(a.rewards, b.rewards)
    c = generate_random_mdp(4, 3, seed=12)
    assert not np.array_equal(a.rewards, c.rewards)


@pytest.mark.parametrize("kwargs", [dict(num_states=0, num_actions=2), dict(num_states=2, num_actions=0),
                                    dict(num_states=2, num_actions=2, dirichlet_alpha=0.0)])
def test_generation_rejects_bad_sizes(kwargs):
    with pytest.raises(ValueError):
        generate_random_mdp(**kwargs)


def test_mdp_validation():
    P = np.ones((1, 1, 1))
    with pytest.raises(ValueError):
        TabularMdp(P * 0.5, np.zeros((1, 1)), 0.9, 2, 0)
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros((1, 1)), 1.5, 2, 0)
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros((1, 1)), 0.9, 0, 0)
    with pytest.raises(ValueError):
        TabularMdp(P, np.array([[np.nan]]), 0.9, 2, 0)


def test_json_roundtrip(tmp_path):
    mdp = generate_random_mdp(3, 2, seed=5, num_goals=2)
    path = tmp_path / "mdp.json"
    mdp.save(path)
    back = TabularMdp.load(path)
    assert np.array_equal(back.transitions, mdp.transitions)
    assert np.array_equal(back.rewards, mdp.rewards)
    assert (back.gamma, back.horizon, back.start_state) == (mdp.gamma, mdp.horizon, mdp.start_state)
    doc = json.loads(path.read_text())
    assert len(doc["transitions"]) == 3 * 2 * 3


def test_policy_probs_examples():
    assert np.allclose(policy_probs(np.zeros((1, 5)), 0), 0.2)
    assert np.allclose(policy_probs(np.log([[1.0, 3.0]]), 0), [0.25, 0.75])


@settings(max_examples=50, deadline=None)
@given(row=st.lists(st.floats(-20, 20), min_size=2, max_size=6), c=st.floats(-50, 50))
def test_softmax_normalised_and_shift_invariant(row, c):
    theta = np.array([row])
    p = policy_probs(theta, 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.allclose(policy_probs(theta + c, 0), p, atol=1e-12)


def test_taylor2_probs_uniform_two_actions():
    theta = np.zeros((1, 2))
    score, hess = log_policy_derivatives(theta, 0, 0)
    assert np.allclose(score, [0.5, -0.5])
    assert np.allclose(hess, [[-0.25, 0.25], [0.25, -0.25]])
    probs = policy_probs_taylor2(theta, 0)
    total = probs[0] + probs[1]
    assert abs(total.value - 1.0) < 1e-12
    assert np.allclose(total.grad, 0, atol=1e-12) and np.allclose(total.hess, 0, atol=1e-12)


def test_taylor2_probs_match_values_and_finite_differences():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=(3, 4))
    x = 1
    probs = policy_probs_taylor2(theta, x)
    ref = policy_probs(theta, x)
    assert [p.value for p in probs] == ref.tolist()
    h1, h2 = 1e-6, 1e-4
    flat = theta.ravel()
    D = flat.size
    for a, p in enumerate(probs):
        f = lambda v: policy_probs(v.reshape(theta.shape), x)[a]
        fd_g = np.array([(f(flat + h1 * e) - f(flat - h1 * e)) / (2 * h1) for e in np.eye(D)])
        assert np.linalg.norm(p.grad - fd_g) <= 1e-5 * np.linalg.norm(fd_g)
        fd_h = np.array([[(f(flat + h2 * (ei + ej)) - f(flat + h2 * (ei - ej)) - f(flat - h2 * (ei - ej))
                           + f(flat - h2 * (ei + ej))) / (4 * h2**2) for ej in np.eye(D)] for ei in np.eye(D)])
        assert np.linalg.norm(p.hess - fd_h) <= 1e-3 * np.linalg.norm(fd_h)
        # derivatives live in the block of state x
        mask = np.zeros(theta.shape, bool)
        mask[x] = True
        assert not p.grad[~mask.ravel()].any()


def test_offpolicy_pair_examples():
    mdp = generate_random_mdp(4, 5, seed=0)
    theta, mu, pi_d = make_offpolicy_pair(mdp, 0.0, seed=1)
    assert np.allclose(theta, np.log(0.2)) and np.allclose(softmax(theta), 0.2)
    assert np.allclose(mu, 0.2)
    assert np.array_equal(pi_d.sum(axis=1), np.ones(4))
    theta, _, pi_d = make_offpolicy_pair(mdp, 0.5, seed=1)
    pi = softmax(theta)
    assert np.allclose(pi[pi_d == 1], 0.6) and np.allclose(pi[pi_d == 0], 0.1)
    theta, _, pi_d = make_offpolicy_pair(mdp, 1.0, seed=1)
    assert np.all(np.isfinite(theta))
    pi = softmax(theta)
    assert np.allclose(pi[pi_d == 0], PROB_FLOOR / (1 + 4 * PROB_FLOOR))


@pytest.mark.parametrize("eps", [-0.1, 1.1])
def test_offpolicy_pair_rejects_bad_epsilon(eps):
    with pytest.raises(ValueError):
        make_offpolicy_pair(generate_random_mdp(2, 2, seed=0), eps)


def test_l1_distance():
    mu = np.full((3, 5), 0.2)
    assert l1_distance(mu, mu) == 0.0
    det = np.zeros((3, 5))
    det[:, 0] = 1.0
    assert abs(l1_distance(det, mu) - 1.6) < 1e-12
    mdp = generate_random_mdp(3, 5, seed=0)
    prev = -1.0
    for eps in np.linspace(0, 0.9, 10):
        theta, mu, pi_d = make_offpolicy_pair(mdp, eps, seed=2)
        d = l1_distance(softmax(theta), mu)
        assert abs(d - eps * l1_distance(pi_d, mu)) < 1e-12
        assert d >= prev
        prev = d


def test_sampling_deterministic_chain(chain_mdp):
    tr = sample_trajectory(chain_mdp, np.ones((2, 1)), np.random.default_rng(0))
    assert tr.states.tolist() == [0, 1, 0]
    assert tr.actions.tolist() == [0, 0, 0]
    assert tr.rewards.tolist() == [1.0, 2.0, 1.0]
    assert tr.final_state == 1
    assert np.all(tr.behavior_logp == 0.0)


def test_sampling_reproducible(tiny_mdp):
    mu = np.full((3, 2), 0.5)
    a = sample_trajectories(tiny_mdp, mu, 5, np.random.default_rng(9))
    b = sample_trajectories(tiny_mdp, mu, 5, np.random.default_rng(9))
    for x, y in zip(a, b):
        assert np.array_equal(x.states, y.states) and np.array_equal(x.actions, y.actions)
    assert all(len(tr) == tiny_mdp.horizon and tr.states[0] == 0 for tr in a)


def test_sampling_requires_full_support(tiny_mdp):
    mu = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ValueError):
        sample_trajectories(tiny_mdp, mu, 1, np.random.default_rng(0))


def test_goal_rewards_used_when_sampling():
    mdp = make_goal_bandit(num_actions=2, horizon=1)
    mu = np.full((1, 2), 0.5)
    for tr in sample_trajectories(mdp, mu, 20, np.random.default_rng(1), goal=1):
        assert tr.rewards[0] == float(tr.actions[0] == 1)


def test_empirical_occupancy_matches_exact():
    mdp = generate_random_mdp(2, 2, dirichlet_alpha=1.0, gamma=0.9, horizon=5, seed=4)
    mu = np.array([[0.3, 0.7], [0.6, 0.4]])
    n = 100_000
    trajs = sample_trajectories(mdp, mu, n, np.random.default_rng(5))
    states = np.stack([tr.states for tr in trajs])
    exact = state_occupancy(mdp, mu)
    for t in range(mdp.horizon):
        freq = np.mean(states[:, t] == 1)
        p = exact[t, 1]
        se = np.sqrt(max(p * (1 - p), 1e-12) / n)
        assert abs(freq - p) <= 3 * se + 1e-12
