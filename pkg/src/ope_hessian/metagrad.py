"""MAML meta-gradients built from differentiated value estimates.

Per task g the meta-gradient is (I + eta H) v, where H is the Hessian of the
inner (on-policy) estimate at theta and v a policy-gradient estimate at the
adapted parameters theta' = theta + eta * grad.  H v is taken from the
Hessian the inner Taylor2 estimate already carries.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import taylor2 as t2
from .estimators import EstimatorConfig, TargetPolicy, build_critic, evaluate_batch
from .mdp import TabularMdp, Trajectory, log_policy_derivatives, sample_trajectories, softmax
from .oracle import exact_q_by_time, exact_value_dp

INNER_MODES = ("sampled", "exact")


@dataclass(frozen=True)
class MetaConfig:
    eta: float = 0.1
    alpha: float = 0.1
    num_tasks: int = 1
    trajectories_per_task: int = 20
    inner_estimator: EstimatorConfig = field(default_factory=lambda: EstimatorConfig(kind="dr"))
    seed: int = 0
    inner_mode: str = "sampled"
    outer_mode: str = "sampled"

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.num_tasks < 1 or self.trajectories_per_task < 1:
            raise ValueError("num_tasks and trajectories_per_task must be >= 1")
        if self.inner_mode not in INNER_MODES or self.outer_mode not in INNER_MODES:
            raise ValueError(f"modes must be one of {INNER_MODES}")


def task_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def inner_update(theta: np.ndarray, mdp: TabularMdp, goal: Optional[int],
                 trajectories: Sequence[Trajectory], config: MetaConfig):
    """One policy-gradient adaptation step from on-policy trajectories.

    Returns ``(theta_prime, inner_estimate)``; the estimate is the batch-mean
    Taylor2 value whose gradient drives the step and whose Hessian is the
    curvature estimate.
    """
    theta = np.asarray(theta, dtype=float)
    behavior = softmax(theta)
    est_cfg = config.inner_estimator
    critic = build_critic(est_cfg.critic, mdp, behavior, theta, goal) if est_cfg.critic != "custom" else None
    estimate = evaluate_batch(est_cfg, trajectories, TargetPolicy(theta), mdp.gamma, critic)
    theta_prime = theta + config.eta * estimate.grad.reshape(theta.shape)
    return theta_prime, estimate


def policy_gradient_estimate(mdp: TabularMdp, theta: np.ndarray, goal: Optional[int],
                             trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Score-function gradient with exact advantages Q_t - V_t of pi_theta."""
    theta = np.asarray(theta, dtype=float)
    Q, V = exact_q_by_time(mdp, softmax(theta), goal)
    grad = np.zeros(theta.size)
    for tr in trajectories:
        for t, (x, a) in enumerate(zip(tr.states.tolist(), tr.actions.tolist())):
            score, _ = log_policy_derivatives(theta, x, a)
            grad += mdp.gamma**t * (Q[t, x, a] - V[t, x]) * score
    return grad / len(trajectories)


def _task_meta_gradient(theta, mdp, goal, config, rng):
    theta = np.asarray(theta, dtype=float)
    B = config.trajectories_per_task
    if config.inner_mode == "exact":
        report = exact_value_dp(mdp, theta, goal)
        theta_prime = theta + config.eta * report.grad.reshape(theta.shape)
        inner = t2.Taylor2(report.value, report.grad, report.hess)
    else:
        trajs = sample_trajectories(mdp, softmax(theta), B, rng, goal)
        theta_prime, inner = inner_update(theta, mdp, goal, trajs, config)
    if config.outer_mode == "exact":
        v = exact_value_dp(mdp, theta_prime, goal).grad
    else:
        fresh = sample_trajectories(mdp, softmax(theta_prime), B, rng, goal)
        v = policy_gradient_estimate(mdp, theta_prime, goal, fresh)
    return v + config.eta * t2.hvp(inner, v)


def meta_gradient_estimate(theta: np.ndarray, goals: Sequence[Optional[int]], mdp: TabularMdp,
                           config: MetaConfig, stream: Sequence[int] = ()) -> np.ndarray:
    """Mean over tasks of (I + eta H_hat) grad_hat V(theta'), reduced in task order.

    Task ``i`` draws from its own RNG substream keyed by
    ``(config.seed, *stream, i)``.
    """
    total = np.zeros(np.asarray(theta).size)
    for i, goal in enumerate(goals):
        total += _task_meta_gradient(theta, mdp, goal, config, task_rng(config.seed, *stream, i))
    return total / len(goals)


def exact_meta_gradient(theta: np.ndarray, mdp: TabularMdp, goal: Optional[int], eta: float) -> np.ndarray:
    """(I + eta H) grad V(theta + eta grad V(theta)) from the DP oracle."""
    cfg = MetaConfig(eta=eta, inner_mode="exact", outer_mode="exact")
    return _task_meta_gradient(theta, mdp, goal, cfg, None)


def meta_objective(theta: np.ndarray, mdp: TabularMdp, goal: Optional[int], eta: float) -> float:
    """F(theta) = V^{pi_theta'}(x_0, g) with the exact adaptation step."""
    theta = np.asarray(theta, dtype=float)
    step = exact_value_dp(mdp, theta, goal).grad.reshape(theta.shape)
    return exact_value_dp(mdp, theta + eta * step, goal).value


def scalar_meta_objective(inner: t2.Taylor2, outer_at_adapted: t2.Taylor2, eta: float):
    """Value and gradient of V_outer(theta + eta * grad V_inner(theta)).

    ``outer_at_adapted`` is the outer objective evaluated (as Taylor2) at the
    adapted parameters; the chain rule only needs the inner Hessian.
    """
    v = outer_at_adapted.grad
    return outer_at_adapted.value, v + eta * t2.hvp(inner, v)


def plugin_bias_probe(mdp: TabularMdp, theta: np.ndarray, config: MetaConfig,
                      batch_sizes: Sequence[int], num_reps: int,
                      goal: Optional[int] = None) -> list[dict]:
    """Monte-Carlo bias of the plug-in meta-gradient estimate per batch size B.

    The reference is the exact meta-gradient.  ``config.inner_mode`` may be
    set to ``"exact"`` to remove the correlated inner estimate.
    """
    exact = exact_meta_gradient(theta, mdp, goal, config.eta)
    rows = []
    for b_index, B in enumerate(batch_sizes):
        cfg = MetaConfig(
            eta=config.eta, alpha=config.alpha, num_tasks=1, trajectories_per_task=int(B),
            inner_estimator=config.inner_estimator, seed=config.seed,
            inner_mode=config.inner_mode, outer_mode=config.outer_mode,
        )
        samples = np.array([
            _task_meta_gradient(theta, mdp, goal, cfg, task_rng(config.seed, 2, b_index, rep))
            for rep in range(num_reps)
        ])
        mean = samples.mean(axis=0)
        stderr = samples.std(axis=0, ddof=1) / np.sqrt(num_reps) if num_reps > 1 else np.zeros_like(mean)
        rows.append({
            "B": int(B),
            "bias_norm": float(np.linalg.norm(mean - exact)),
            "stderr_norm": float(np.linalg.norm(stderr)),
            "num_reps": int(num_reps),
        })
    return rows


def meta_train_demo(mdp: TabularMdp, config: MetaConfig, num_iterations: int,
                    theta0: Optional[np.ndarray] = None) -> list[dict]:
    """Outer-loop ascent theta <- theta + alpha * meta-gradient on a goal set.

    Records exact pre- and post-adaptation values averaged over all goals.
    """
    G = mdp.num_goals
    if G is None:
        raise ValueError("meta_train_demo needs goal-indexed rewards")
    theta = np.zeros((mdp.num_states, mdp.num_actions)) if theta0 is None else np.array(theta0, dtype=float)
    goal_rng = task_rng(config.seed, 0)
    records = []
    for it in range(num_iterations + 1):
        pre = np.mean([exact_value_dp(mdp, theta, g).value for g in range(G)])
        post = np.mean([meta_objective(theta, mdp, g, config.eta) for g in range(G)])
        if it == num_iterations:
            records.append({"iteration": it, "pre_value": pre, "post_value": post, "grad_norm": 0.0})
            break
        goals = goal_rng.integers(G, size=config.num_tasks).tolist()
        grad = meta_gradient_estimate(theta, goals, mdp, config, stream=(1, it))
        records.append({"iteration": it, "pre_value": pre, "post_value": post,
                        "grad_norm": float(np.linalg.norm(grad))})
        theta = theta + config.alpha * grad.reshape(theta.shape)
    return records


def records_to_csv(records: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["iteration", "pre_value", "post_value", "grad_norm"],
                            lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow({k: repr(float(v)) if k != "iteration" else int(v) for k, v in rec.items()})
    return buf.getvalue()
