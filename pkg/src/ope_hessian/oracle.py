"""Exact values and derivatives for small tabular MDPs.

Two independent routes to the truth:

* finite-horizon dynamic programming carried out in Taylor2 arithmetic, and
* brute-force enumeration of every trajectory, weighting each by its exact
  probability.

Enumeration also turns expectations of estimators into exact sums, which is
how unbiasedness claims are checked without Monte-Carlo noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import taylor2 as t2
from .estimators import EstimatorConfig, TargetPolicy, CriticTable, evaluate
from .mdp import TabularMdp, Trajectory, softmax

DEFAULT_BUDGET = 10**6


class EnumerationBudgetError(ValueError):
    """The MDP has too many trajectories to enumerate."""


@dataclass(frozen=True)
class DerivativeReport:
    value: float
    grad: np.ndarray
    hess: np.ndarray
    method: str

    @classmethod
    def from_taylor2(cls, s: t2.Taylor2, method: str) -> "DerivativeReport":
        return cls(float(s.value), np.array(s.grad), np.array(s.hess), method)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "grad": self.grad.tolist(),
            "hess": self.hess.tolist(),
            "method": self.method,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ---------- dynamic programming ----------

def exact_q_by_time(mdp: TabularMdp, policy: np.ndarray, goal: Optional[int] = None):
    """Finite-horizon Q_t and V_t for a fixed policy table.

    Returns ``(Q, V)`` with ``Q.shape == (T, X, A)`` (remaining horizon T - t)
    and ``V.shape == (T + 1, X)``, ``V[T] == 0``.
    """
    policy = np.asarray(policy, dtype=float)
    r = mdp.reward_table(goal)
    T = mdp.horizon
    Q = np.zeros((T, mdp.num_states, mdp.num_actions))
    V = np.zeros((T + 1, mdp.num_states))
    for t in range(T - 1, -1, -1):
        Q[t] = r + mdp.gamma * mdp.transitions @ V[t + 1]
        V[t] = (policy * Q[t]).sum(axis=1)
    return Q, V


def exact_q_table(mdp: TabularMdp, policy: np.ndarray, goal: Optional[int] = None):
    """Q^pi and V^pi over the full horizon T (no derivative tracking)."""
    Q, V = exact_q_by_time(mdp, policy, goal)
    return Q[0], V[0]


def exact_value_dp(mdp: TabularMdp, theta: np.ndarray, goal: Optional[int] = None) -> DerivativeReport:
    """V^{pi_theta}(x_0) with gradient and Hessian, by Bellman backups in Taylor2."""
    policy = TargetPolicy(theta)
    if policy.theta.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("theta shape does not match the MDP")
    r = mdp.reward_table(goal)
    D = policy.dim
    v_next = [t2.constant(0.0, D) for _ in range(mdp.num_states)]
    for _ in range(mdp.horizon):
        v_now = []
        for x in range(mdp.num_states):
            probs = policy.state_probs(x)
            q_x = [
                t2.linear_combination(mdp.transitions[x, a], v_next) * mdp.gamma + float(r[x, a])
                for a in range(mdp.num_actions)
            ]
            total = probs[0] * q_x[0]
            for a in range(1, mdp.num_actions):
                total = total + probs[a] * q_x[a]
            v_now.append(total)
        v_next = v_now
    return DerivativeReport.from_taylor2(v_next[mdp.start_state], "dp")


# ---------- enumeration ----------

def count_paths(mdp: TabularMdp) -> int:
    return (mdp.num_states * mdp.num_actions) ** mdp.horizon


def _check_budget(mdp: TabularMdp, budget: int) -> None:
    n = count_paths(mdp)
    if n > budget:
        raise EnumerationBudgetError(
            f"{n} trajectories exceed the enumeration budget of {budget}; "
            "shrink the state/action spaces or the horizon"
        )


def enumerate_trajectories(mdp: TabularMdp, behavior: np.ndarray, goal: Optional[int] = None,
                           budget: int = DEFAULT_BUDGET) -> Iterator[tuple[float, Trajectory]]:
    """Yield ``(probability, trajectory)`` for every positive-probability path
    of length T from x_0 under ``behavior``, in lexicographic order."""
    _check_budget(mdp, budget)
    behavior = np.asarray(behavior, dtype=float)
    r = mdp.reward_table(goal)
    with np.errstate(divide="ignore"):
        log_mu = np.log(behavior)
    T = mdp.horizon
    X, A = mdp.num_states, mdp.num_actions
    states = np.empty(T, dtype=np.int64)
    actions = np.empty(T, dtype=np.int64)

    def rec(t, x, prob):
        if t == T:
            yield prob, Trajectory(
                states.copy(), actions.copy(), r[states, actions].copy(),
                log_mu[states, actions].copy(), int(x),
            )
            return
        for a in range(A):
            pa = behavior[x, a]
            if pa == 0:
                continue
            states[t] = x
            actions[t] = a
            for y in range(X):
                py = mdp.transitions[x, a, y]
                if py == 0:
                    continue
                yield from rec(t + 1, y, prob * pa * py)

    yield from rec(0, mdp.start_state, 1.0)


def exact_value_enumeration(mdp: TabularMdp, theta: np.ndarray, goal: Optional[int] = None,
                            budget: int = DEFAULT_BUDGET) -> DerivativeReport:
    """V^{pi_theta}(x_0) and derivatives by summing over all trajectories.

    Each path contributes P_theta(path) * return(path), with the action
    probabilities carried as Taylor2 scalars.
    """
    policy = TargetPolicy(theta)
    D = policy.dim
    gamma = mdp.gamma
    discounts = gamma ** np.arange(mdp.horizon)
    total = t2.constant(0.0, D)
    # enumerate under pi_theta's support; dynamics weights are constants
    for _, traj in enumerate_trajectories(mdp, policy.probs, goal, budget):
        p_path = 1.0
        for t in range(len(traj)):
            p_path *= mdp.transitions[traj.states[t], traj.actions[t],
                                      traj.states[t + 1] if t + 1 < len(traj) else traj.final_state]
        weight = t2.constant(p_path * float(discounts @ traj.rewards), D)
        for x, a in zip(traj.states.tolist(), traj.actions.tolist()):
            weight = weight * policy.prob(x, a)
        total = total + weight
    return DerivativeReport.from_taylor2(total, "enumeration")


def exact_expectation(mdp: TabularMdp, behavior: np.ndarray, fn: Callable[[Trajectory], object],
                      goal: Optional[int] = None, budget: int = DEFAULT_BUDGET):
    """E_mu[fn(trajectory)] by exhaustive enumeration (fn may return Taylor2)."""
    total = None
    for prob, traj in enumerate_trajectories(mdp, behavior, goal, budget):
        term = fn(traj) * prob
        total = term if total is None else total + term
    return total


def exact_expected_estimate(mdp: TabularMdp, theta: np.ndarray, behavior: np.ndarray,
                            config: EstimatorConfig, critic: Optional[CriticTable] = None,
                            goal: Optional[int] = None,
                            budget: int = DEFAULT_BUDGET) -> DerivativeReport:
    """Exact E_mu[value, grad, Hessian of the estimate] over all trajectories."""
    if config.kind == "taypo-subsampled":
        raise ValueError("sub-sampled estimators are randomised; enumerate the exact TayPO instead")
    policy = TargetPolicy(theta)
    result = exact_expectation(
        mdp, behavior, lambda tr: evaluate(config, tr, policy, mdp.gamma, critic), goal, budget
    )
    return DerivativeReport.from_taylor2(result, "enumeration")


def exact_increments(mdp: TabularMdp, theta: np.ndarray, behavior: np.ndarray, max_order: int,
                     goal: Optional[int] = None, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Exact Taylor increments U_0..U_{max_order} of V^{pi_theta}(x_0) around mu.

    U_K = E_mu[ sum_{t_1<...<t_K} gamma^{t_K} prod_i (rho_{t_i} - 1) Q^mu_{t_K}(x, a) ]
    with the finite-horizon, time-indexed Q^mu.
    """
    if max_order < 0:
        raise ValueError("order must be >= 0")
    behavior = np.asarray(behavior, dtype=float)
    pi = softmax(theta)
    Q_mu, V_mu = exact_q_by_time(mdp, behavior, goal)
    T = mdp.horizon
    gamma = mdp.gamma
    out = np.zeros(max_order + 1)
    out[0] = V_mu[0, mdp.start_state]
    if max_order == 0:
        return out
    for prob, traj in enumerate_trajectories(mdp, behavior, goal, budget):
        s, a = traj.states, traj.actions
        centred = pi[s, a] / behavior[s, a] - 1.0
        q = Q_mu[np.arange(T), s, a]
        # ends[k][t]: sum over k-subsets with max element t of prod (rho - 1)
        prev = centred.copy()
        for k in range(1, max_order + 1):
            if k > 1:
                below = np.concatenate(([0.0], np.cumsum(prev)[:-1]))
                prev = centred * below
            out[k] += prob * float(np.sum(gamma ** np.arange(T) * prev * q))
    return out


def exact_increment(mdp: TabularMdp, theta: np.ndarray, behavior: np.ndarray, order: int,
                    goal: Optional[int] = None, budget: int = DEFAULT_BUDGET) -> float:
    return float(exact_increments(mdp, theta, behavior, order, goal, budget)[order])


def taylor_partial_sum(mdp: TabularMdp, theta: np.ndarray, behavior: np.ndarray, order: int,
                       goal: Optional[int] = None, budget: int = DEFAULT_BUDGET) -> float:
    """V_K = U_0 + ... + U_K."""
    return float(exact_increments(mdp, theta, behavior, order, goal, budget).sum())
