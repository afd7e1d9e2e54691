"""Tabular MDPs, softmax policies and trajectory sampling.

Policy parameters ``theta`` are arrays of shape ``(num_states, num_actions)``;
whenever they are flattened (gradients, Hessians) the order is x-major, i.e.
index ``x * num_actions + a``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .taylor2 import Taylor2

PROB_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite-horizon discounted MDP with optional goal-indexed rewards.

    ``transitions[x, a, y]`` is P(y | x, a); ``rewards`` is ``(X, A)`` or
    ``(X, A, G)`` for G goals.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    horizon: int
    start_state: int = 0

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        r = np.asarray(self.rewards, dtype=float)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transitions must have shape (X, A, X), got {P.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be non-negative and sum to 1")
        if r.shape[:2] != P.shape[:2] or r.ndim not in (2, 3):
            raise ValueError(f"rewards shape {r.shape} does not match transitions {P.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 <= self.start_state < P.shape[0]:
            raise ValueError("start_state out of range")
        P.setflags(write=False)
        r.setflags(write=False)

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_goals(self) -> Optional[int]:
        return self.rewards.shape[2] if self.rewards.ndim == 3 else None

    @property
    def dim(self) -> int:
        return self.num_states * self.num_actions

    def reward_table(self, goal: Optional[int] = None) -> np.ndarray:
        if self.rewards.ndim == 2:
            if goal is not None:
                raise ValueError("this MDP has no goal-indexed rewards")
            return self.rewards
        if goal is None:
            raise ValueError("goal index required for goal-indexed rewards")
        return self.rewards[:, :, goal]

    def with_horizon(self, horizon: int) -> "TabularMdp":
        return TabularMdp(self.transitions, self.rewards, self.gamma, horizon, self.start_state)

    def with_gamma(self, gamma: float) -> "TabularMdp":
        return TabularMdp(self.transitions, self.rewards, gamma, self.horizon, self.start_state)

    # ---------- serialization ----------
    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "num_goals": self.num_goals,
            "transitions": self.transitions.ravel().tolist(),
            "rewards": self.rewards.ravel().tolist(),
            "gamma": self.gamma,
            "horizon": self.horizon,
            "start_state": self.start_state,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        X, A = int(doc["num_states"]), int(doc["num_actions"])
        G = doc.get("num_goals")
        P = np.asarray(doc["transitions"], dtype=float).reshape(X, A, X)
        r_shape = (X, A) if G is None else (X, A, int(G))
        r = np.asarray(doc["rewards"], dtype=float).reshape(r_shape)
        return cls(P, r, float(doc["gamma"]), int(doc["horizon"]), int(doc.get("start_state", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_random_mdp(
    num_states: int,
    num_actions: int,
    dirichlet_alpha: float = 0.001,
    gamma: float = 0.8,
    horizon: int = 20,
    seed=0,
    start_state: int = 0,
    num_goals: Optional[int] = None,
) -> TabularMdp:
    """Random MDP: Dirichlet(alpha) transition rows, Uniform[0, 1] rewards."""
    if num_states < 1 or num_actions < 1:
        raise ValueError("num_states and num_actions must be >= 1")
    if dirichlet_alpha <= 0:
        raise ValueError("dirichlet_alpha must be positive")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(num_states, dirichlet_alpha), size=(num_states, num_actions))
    # tiny alpha can underflow a whole row; fall back to a point mass
    bad = ~np.isfinite(P).all(axis=2) | (P.sum(axis=2) <= 0)
    if bad.any():
        P[bad] = 0.0
        P[bad, rng.integers(num_states, size=int(bad.sum()))] = 1.0
    P = P / P.sum(axis=2, keepdims=True)
    shape = (num_states, num_actions) if num_goals is None else (num_states, num_actions, num_goals)
    rewards = rng.uniform(0.0, 1.0, size=shape)
    return TabularMdp(P, rewards, gamma, horizon, start_state)


def make_goal_bandit(num_actions: int = 2, horizon: int = 1, gamma: float = 0.9,
                     num_goals: Optional[int] = None) -> TabularMdp:
    """Single-state meta-MDP where goal ``g`` rewards action ``g`` only.

    With ``num_goals < num_actions`` the remaining actions never pay off.
    """
    num_goals = num_actions if num_goals is None else num_goals
    if not 1 <= num_goals <= num_actions:
        raise ValueError("num_goals must lie in [1, num_actions]")
    P = np.ones((1, num_actions, 1))
    rewards = np.zeros((1, num_actions, num_goals))
    for g in range(num_goals):
        rewards[0, g, g] = 1.0
    return TabularMdp(P, rewards, gamma, horizon, 0)


# ---------- softmax policies ----------

def softmax(theta: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a logit table."""
    z = np.asarray(theta, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def policy_probs(theta: np.ndarray, state: int) -> np.ndarray:
    return softmax(np.asarray(theta)[state])


def policy_probs_taylor2(theta: np.ndarray, state: int) -> list[Taylor2]:
    """Action probabilities at ``state`` as Taylor2 scalars over flattened theta.

    Uses the closed-form softmax derivatives; only the block of ``state`` is
    nonzero.
    """
    theta = np.asarray(theta, dtype=float)
    X, A = theta.shape
    D = X * A
    p = softmax(theta[state])
    lo = state * A
    block = slice(lo, lo + A)
    fisher = np.diag(p) - np.outer(p, p)
    out = []
    for a in range(A):
        score = -p.copy()
        score[a] += 1.0
        grad = np.zeros(D)
        grad[block] = p[a] * score
        hess = np.zeros((D, D))
        hess[block, block] = p[a] * (np.outer(score, score) - fisher)
        out.append(Taylor2(float(p[a]), grad, hess))
    return out


def log_policy_derivatives(theta: np.ndarray, state: int, action: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of log pi(action | state) over flattened theta."""
    theta = np.asarray(theta, dtype=float)
    X, A = theta.shape
    D = X * A
    p = softmax(theta[state])
    block = slice(state * A, state * A + A)
    grad = np.zeros(D)
    grad[block] = -p
    grad[state * A + action] += 1.0
    hess = np.zeros((D, D))
    hess[block, block] = np.outer(p, p) - np.diag(p)
    return grad, hess


def make_offpolicy_pair(mdp: TabularMdp, epsilon: float, seed=0):
    """Target logits and behaviour policy for the off-policyness study.

    Returns ``(theta, mu, pi_d)`` with ``mu`` uniform, ``pi_d`` a one-hot
    deterministic policy chosen uniformly at random per state, and
    ``theta = log((1 - eps) * mu + eps * pi_d)`` after flooring probabilities
    at ``PROB_FLOOR`` and renormalising.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    num_states, num_actions = mdp.num_states, mdp.num_actions
    rng = np.random.default_rng(seed)
    mu = np.full((num_states, num_actions), 1.0 / num_actions)
    pi_d = np.zeros((num_states, num_actions))
    pi_d[np.arange(num_states), rng.integers(num_actions, size=num_states)] = 1.0
    pi = (1.0 - epsilon) * mu + epsilon * pi_d
    if pi.min() < PROB_FLOOR:
        pi = np.maximum(pi, PROB_FLOOR)
        pi = pi / pi.sum(axis=1, keepdims=True)
    return np.log(pi), mu, pi_d


def l1_distance(pi: np.ndarray, mu: np.ndarray) -> float:
    """max over states of the L1 distance between action distributions."""
    return float(np.max(np.abs(np.asarray(pi) - np.asarray(mu)).sum(axis=1)))


# ---------- trajectories ----------

@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode of length T logged under a behaviour policy.

    ``final_state`` is x_T.  ``final_action`` (a_T drawn from the behaviour
    policy at x_T) is only present when the sampler was asked for it; it is
    needed to bootstrap TayPO tail returns with a critic.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_logp: np.ndarray
    final_state: int
    final_action: Optional[int] = field(default=None)

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.behavior_logp) == n):
            raise ValueError("trajectory arrays differ in length")
        if not np.all(np.isfinite(self.behavior_logp)):
            raise ValueError("behaviour log-probabilities must be finite")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def steps(self) -> Iterator[tuple[int, int, float, float]]:
        return zip(self.states.tolist(), self.actions.tolist(), self.rewards.tolist(), self.behavior_logp.tolist())


def _check_behavior(behavior: np.ndarray) -> np.ndarray:
    behavior = np.asarray(behavior, dtype=float)
    if np.any(behavior <= 0):
        raise ValueError("behaviour policy must give every action positive probability")
    return behavior


def _categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def sample_trajectories(
    mdp: TabularMdp,
    behavior: np.ndarray,
    n: int,
    rng: np.random.Generator,
    goal: Optional[int] = None,
    final_action: bool = False,
) -> list[Trajectory]:
    """Sample ``n`` trajectories of length ``mdp.horizon`` from ``x_0``."""
    behavior = _check_behavior(behavior)
    r = mdp.reward_table(goal)
    T = mdp.horizon
    act_cdf = np.cumsum(behavior, axis=1)
    next_cdf = np.cumsum(mdp.transitions, axis=2)
    log_mu = np.log(behavior)
    states = np.empty((n, T), dtype=np.int64)
    actions = np.empty((n, T), dtype=np.int64)
    x = np.full(n, mdp.start_state, dtype=np.int64)
    for t in range(T):
        a = _categorical(act_cdf[x], rng.random(n))
        states[:, t] = x
        actions[:, t] = a
        x = _categorical(next_cdf[x, a], rng.random(n))
    last = _categorical(act_cdf[x], rng.random(n)) if final_action else None
    rewards = r[states, actions]
    logp = log_mu[states, actions]
    return [
        Trajectory(
            states[i], actions[i], rewards[i], logp[i], int(x[i]),
            None if last is None else int(last[i]),
        )
        for i in range(n)
    ]


def sample_trajectory(
    mdp: TabularMdp,
    behavior: np.ndarray,
    rng: np.random.Generator,
    goal: Optional[int] = None,
    final_action: bool = False,
) -> Trajectory:
    return sample_trajectories(mdp, behavior, 1, rng, goal, final_action)[0]


def state_occupancy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Exact P(x_t = x) for t < T as a (T, X) array, by propagating the chain."""
    P_pi = np.einsum("xa,xay->xy", policy, mdp.transitions)
    dist = np.zeros(mdp.num_states)
    dist[mdp.start_state] = 1.0
    out = np.empty((mdp.horizon, mdp.num_states))
    for t in range(mdp.horizon):
        out[t] = dist
        dist = dist @ P_pi
    return out
