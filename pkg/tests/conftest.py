import numpy as np
import pytest

from ope_hessian.mdp import TabularMdp, Trajectory, generate_random_mdp


def make_trajectory(states, actions, rewards, behavior_probs, final_state=0, final_action=None):
    return Trajectory(
        np.asarray(states, dtype=np.int64),
        np.asarray(actions, dtype=np.int64),
        np.asarray(rewards, dtype=float),
        np.log(np.asarray(behavior_probs, dtype=float)),
        int(final_state),
        final_action,
    )


def trajectory_with_ratios(theta, states, actions, rewards, ratios, final_state=0):
    """Trajectory whose logged behaviour probabilities give the requested ratios."""
    from ope_hessian.mdp import softmax

    pi = softmax(np.asarray(theta, dtype=float))
    mu = [pi[x, a] / r for x, a, r in zip(states, actions, ratios)]
    return make_trajectory(states, actions, rewards, mu, final_state)


def random_theta(mdp, seed):
    return np.random.default_rng(seed).normal(size=(mdp.num_states, mdp.num_actions))


@pytest.fixture
def tiny_mdp():
    return generate_random_mdp(3, 2, dirichlet_alpha=1.0, gamma=0.8, horizon=4, seed=7)


@pytest.fixture
def small_mdp():
    return generate_random_mdp(2, 2, dirichlet_alpha=1.0, gamma=0.9, horizon=3, seed=3)


@pytest.fixture
def chain_mdp():
    # deterministic two-state cycle 0 -> 1 -> 0, single action
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 0] = 1.0
    return TabularMdp(P, np.array([[1.0], [2.0]]), 0.5, 3, 0)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
