"""Audit of the TMAML control-variate objective.

J = sum_t (1 - prod_{s<=t} rho_s)(1 - rho_t) b(x_t) with rho_t = pi / sg(pi),
undiscounted over a finite horizon H.  Its value is identically zero on-policy
but its expected Hessian is E[2 sum_t b(x_t) s_t s_t^T] (s_t the score), which
is not zero, so adding J biases a Hessian estimate.
"""
from __future__ import annotations

import numpy as np

from . import taylor2 as t2
from .estimators import TargetPolicy
from .mdp import TabularMdp, Trajectory, log_policy_derivatives
from .oracle import DEFAULT_BUDGET, exact_expectation


def _undiscounted(mdp: TabularMdp) -> TabularMdp:
    return mdp if mdp.gamma == 1.0 else mdp.with_gamma(1.0)


def eval_tmaml_j(trajectory: Trajectory, theta, baseline: np.ndarray) -> t2.Taylor2:
    """J on one trajectory, with the stop-gradient realised by ratios against
    the frozen current policy."""
    policy = theta if isinstance(theta, TargetPolicy) else TargetPolicy(theta)
    baseline = np.asarray(baseline, dtype=float)
    total = t2.constant(0.0, policy.dim)
    prod = 1.0
    for x, a, _, _ in trajectory.steps:
        rho = policy.ratio(x, a, float(policy.log_probs[x, a]))
        prod = rho * prod
        total = total + (1.0 - prod) * (1.0 - rho) * float(baseline[x])
    return total


def _scores(trajectory: Trajectory, theta) -> list[np.ndarray]:
    return [log_policy_derivatives(theta, x, a)[0]
            for x, a in zip(trajectory.states.tolist(), trajectory.actions.tolist())]


def tmaml_hessian_closed_form(trajectory: Trajectory, theta, baseline: np.ndarray) -> np.ndarray:
    """2 sum_t s_t (sum_{s>=t} s_s b(x_s))^T for one trajectory (not symmetric)."""
    baseline = np.asarray(baseline, dtype=float)
    scores = _scores(trajectory, theta)
    out = np.zeros((scores[0].size, scores[0].size))
    tail = np.zeros(scores[0].size)
    for t in range(len(scores) - 1, -1, -1):
        tail = tail + scores[t] * baseline[trajectory.states[t]]
        out += 2.0 * np.outer(scores[t], tail)
    return out


def tmaml_cross_term(trajectory: Trajectory, theta, baseline: np.ndarray) -> np.ndarray:
    """The s > t part: 2 sum_t s_t (sum_{s>t} s_s b(x_s))^T."""
    baseline = np.asarray(baseline, dtype=float)
    scores = _scores(trajectory, theta)
    out = np.zeros((scores[0].size, scores[0].size))
    tail = np.zeros(scores[0].size)
    for t in range(len(scores) - 1, -1, -1):
        out += 2.0 * np.outer(scores[t], tail)
        tail = tail + scores[t] * baseline[trajectory.states[t]]
    return out


def tmaml_diagonal_term(trajectory: Trajectory, theta, baseline: np.ndarray) -> np.ndarray:
    """2 sum_t b(x_t) s_t s_t^T."""
    baseline = np.asarray(baseline, dtype=float)
    scores = _scores(trajectory, theta)
    return sum(2.0 * baseline[x] * np.outer(s, s) for s, x in zip(scores, trajectory.states.tolist()))


def expected_tmaml_hessian(mdp: TabularMdp, theta: np.ndarray, baseline: np.ndarray,
                           budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Exact E_{pi_theta}[Hessian of J] by trajectory enumeration (gamma = 1)."""
    mdp = _undiscounted(mdp)
    policy = TargetPolicy(theta)
    result = exact_expectation(mdp, policy.probs, lambda tr: eval_tmaml_j(tr, policy, baseline),
                               budget=budget, goal=_any_goal(mdp))
    return np.array(result.hess)


def expected_tmaml_closed_form(mdp: TabularMdp, theta: np.ndarray, baseline: np.ndarray,
                               budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Exact E[2 sum_t b(x_t) s_t s_t^T] by enumeration."""
    mdp = _undiscounted(mdp)
    policy = TargetPolicy(theta)
    return exact_expectation(mdp, policy.probs, lambda tr: tmaml_diagonal_term(tr, theta, baseline),
                             budget=budget, goal=_any_goal(mdp))


def expected_cross_term(mdp: TabularMdp, theta: np.ndarray, baseline: np.ndarray,
                        budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Exact expectation of the s > t cross term (zero in theory)."""
    mdp = _undiscounted(mdp)
    policy = TargetPolicy(theta)
    return exact_expectation(mdp, policy.probs, lambda tr: tmaml_cross_term(tr, theta, baseline),
                             budget=budget, goal=_any_goal(mdp))


def _any_goal(mdp: TabularMdp):
    # rewards never enter J; any goal slice will do
    return 0 if mdp.num_goals is not None else None


def tmaml_bias_report(mdp: TabularMdp, theta: np.ndarray, baseline: np.ndarray) -> dict:
    """Exact expected Hessian of J, its Frobenius norm and the identity checks."""
    hess = expected_tmaml_hessian(mdp, theta, baseline)
    closed = expected_tmaml_closed_form(mdp, theta, baseline)
    cross = expected_cross_term(mdp, theta, baseline)
    return {
        "expected_hessian": hess.tolist(),
        "frobenius_norm": float(np.linalg.norm(hess)),
        "closed_form_max_error": float(np.max(np.abs(hess - closed))),
        "cross_term_max_abs": float(np.max(np.abs(cross))),
        "horizon": mdp.horizon,
    }
