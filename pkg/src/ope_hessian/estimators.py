"""Off-policy evaluation estimators written against Taylor2 arithmetic.

Every ``eval_*`` function maps one behaviour trajectory and a target policy to
a value estimate.  Passing a differentiating :class:`TargetPolicy` makes the
result a :class:`~ope_hessian.taylor2.Taylor2`, whose gradient and Hessian are
the derivative estimates; a non-differentiating policy gives plain floats with
the same code path, which keeps Monte-Carlo checks cheap.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import taylor2 as t2
from .mdp import TabularMdp, Trajectory, log_policy_derivatives, softmax
from .taylor2 import Taylor2

Scalar = Union[Taylor2, float]

KINDS = ("is", "dr", "truncated-dr", "taypo", "taypo-subsampled", "mixture")
CRITICS = ("zero", "exact-q-mu", "exact-q-pi")


class CriticTable:
    """State-action critic Q[x, a], optionally indexed by time as Q[t, x, a].

    A time-indexed table holds ``T`` slices; at ``t >= T`` the remaining
    horizon is empty and the critic is zero.
    """

    def __init__(self, q: np.ndarray):
        q = np.asarray(q, dtype=float)
        if q.ndim not in (2, 3):
            raise ValueError(f"critic must be (X, A) or (T, X, A), got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise ValueError("critic entries must be finite")
        self.q = q
        self._zero_row = np.zeros(q.shape[-1])

    @classmethod
    def zeros(cls, num_states: int, num_actions: int) -> "CriticTable":
        return cls(np.zeros((num_states, num_actions)))

    @property
    def time_indexed(self) -> bool:
        return self.q.ndim == 3

    @property
    def is_zero(self) -> bool:
        return not self.q.any()

    def row(self, t: int, x: int) -> np.ndarray:
        if self.q.ndim == 2:
            return self.q[x]
        if t >= self.q.shape[0]:
            return self._zero_row
        return self.q[t, x]

    def at(self, t: int, x: int, a: int) -> float:
        return float(self.row(t, x)[a])


class TargetPolicy:
    """Softmax policy pi_theta with cached per-(x, a) Taylor2 probabilities.

    With ``differentiate=False`` every query returns plain floats.
    """

    def __init__(self, theta: np.ndarray, differentiate: bool = True):
        self.theta = np.asarray(theta, dtype=float)
        if self.theta.ndim != 2:
            raise ValueError("theta must be a (num_states, num_actions) table")
        self.differentiate = differentiate
        self.probs = softmax(self.theta)
        self.log_probs = np.log(self.probs)
        self._prob_cache: dict[int, list] = {}
        self._critic_cache: dict = {}

    @property
    def num_states(self) -> int:
        return self.theta.shape[0]

    @property
    def num_actions(self) -> int:
        return self.theta.shape[1]

    @property
    def dim(self) -> int:
        return self.theta.size

    def state_probs(self, x: int) -> list:
        row = self._prob_cache.get(x)
        if row is None:
            if self.differentiate:
                from .mdp import policy_probs_taylor2

                row = policy_probs_taylor2(self.theta, x)
            else:
                row = [float(p) for p in self.probs[x]]
            self._prob_cache[x] = row
        return row

    def prob(self, x: int, a: int) -> Scalar:
        return self.state_probs(x)[a]

    def ratio(self, x: int, a: int, behavior_logp: float) -> Scalar:
        """pi(a|x) / mu(a|x); the value is formed in log space so that an
        on-policy ratio is exactly 1."""
        value = math.exp(self.log_probs[x, a] - behavior_logp)
        if not self.differentiate:
            return value
        p = self.prob(x, a)
        scale = math.exp(-behavior_logp)
        return Taylor2(value, p.grad * scale, p.hess * scale)

    def critic_value(self, critic: CriticTable, t: int, x: int) -> Scalar:
        """Q(x, pi(x)) = sum_a Q(x, a) pi(a|x) at time t."""
        key = (id(critic), t if critic.time_indexed else -1, x)
        hit = self._critic_cache.get(key)
        if hit is not None and hit[0] is critic:
            return hit[1]
        val = t2.linear_combination(critic.row(t, x), self.state_probs(x))
        if not self.differentiate:
            val = float(val)
        self._critic_cache[key] = (critic, val)
        return val


def as_policy(theta) -> TargetPolicy:
    return theta if isinstance(theta, TargetPolicy) else TargetPolicy(theta)


def _zero_like(policy: TargetPolicy) -> Scalar:
    return t2.constant(0.0, policy.dim) if policy.differentiate else 0.0


def _lift(policy: TargetPolicy, c: float) -> Scalar:
    return t2.constant(c, policy.dim) if policy.differentiate else float(c)


def _default_critic(policy: TargetPolicy, critic: Optional[CriticTable]) -> CriticTable:
    return critic if critic is not None else CriticTable.zeros(policy.num_states, policy.num_actions)


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator to run and its knobs.

    ``critic`` is one of ``zero``, ``exact-q-mu``, ``exact-q-pi`` or
    ``custom`` (a table supplied separately).
    """

    kind: str = "dr"
    order: int = 1
    rho_bar: float = 1.0
    beta: float = 0.3
    critic: str = "exact-q-mu"
    bootstrap: bool = False
    num_chains: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; choose from {KINDS}")
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if not self.rho_bar > 0:
            raise ValueError("rho_bar must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.critic not in CRITICS + ("custom",):
            raise ValueError(f"unknown critic {self.critic!r}")
        if self.kind == "taypo-subsampled" and self.order < 1:
            raise ValueError("sub-sampled TayPO needs order >= 1")

    @property
    def name(self) -> str:
        if self.kind == "taypo":
            return f"taypo-{self.order}"
        if self.kind == "taypo-subsampled":
            return f"taypo-{self.order}-subsampled"
        if self.kind == "is":
            return "step-is"
        return self.kind

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EstimatorConfig":
        doc = dict(doc)
        if "name" in doc:
            base = cls.from_name(doc.pop("name"))
            doc = {**asdict(base), **doc}
        if "K" in doc:
            doc["order"] = doc.pop("K")
        return cls(**doc)

    @classmethod
    def from_name(cls, name: str, **overrides) -> "EstimatorConfig":
        """Parse short names such as ``step-is``, ``dr``, ``taypo-2``."""
        name = name.strip().lower()
        if name in ("is", "step-is"):
            return cls(kind="is", **overrides)
        if name in ("dr", "truncated-dr", "mixture"):
            return cls(kind=name, **overrides)
        if name.startswith("taypo-"):
            rest = name[len("taypo-"):]
            sub = rest.endswith("-subsampled")
            order = int(rest.removesuffix("-subsampled"))
            return cls(kind="taypo-subsampled" if sub else "taypo", order=order, **overrides)
        raise ValueError(f"unknown estimator name {name!r}")


# ---------- building blocks ----------

def is_ratio(theta, trajectory: Trajectory, t: int) -> Scalar:
    policy = as_policy(theta)
    logp = float(trajectory.behavior_logp[t])
    if not math.isfinite(logp):
        raise ValueError("behaviour probability is zero")
    return policy.ratio(int(trajectory.states[t]), int(trajectory.actions[t]), logp)


def _ratios(policy: TargetPolicy, trajectory: Trajectory) -> list:
    return [policy.ratio(x, a, lp) for x, a, _, lp in trajectory.steps]


def tail_returns(trajectory: Trajectory, gamma: float, critic: Optional[CriticTable] = None,
                 bootstrap: bool = False) -> np.ndarray:
    """Q-hat(x_t, a_t) = sum_{s>=t} gamma^{s-t} r_s (+ gamma^{T-t} Q(x_T, a_T))."""
    T = len(trajectory)
    tail = 0.0
    if bootstrap and critic is not None:
        if trajectory.final_action is None:
            raise ValueError("bootstrapping TayPO needs trajectories sampled with final_action=True")
        tail = critic.at(T, trajectory.final_state, trajectory.final_action)
    out = np.empty(T)
    for t in range(T - 1, -1, -1):
        tail = trajectory.rewards[t] + gamma * tail
        out[t] = tail
    return out


# ---------- estimators ----------

def eval_step_is(trajectory: Trajectory, theta, gamma: float) -> Scalar:
    """Step-wise importance sampling: sum_t gamma^t (prod_{s<=t} rho_s) r_t."""
    policy = as_policy(theta)
    rho = _ratios(policy, trajectory)
    v = _zero_like(policy)
    for t in range(len(trajectory) - 1, -1, -1):
        v = rho[t] * (gamma * v + float(trajectory.rewards[t]))
    return v


def _dr_recursion(policy, trajectory, gamma, critic, bootstrap, ratio_fn):
    T = len(trajectory)
    if bootstrap:
        v = policy.critic_value(critic, T, trajectory.final_state)
    else:
        v = _zero_like(policy)
    for t in range(T - 1, -1, -1):
        x, a = int(trajectory.states[t]), int(trajectory.actions[t])
        rho = ratio_fn(x, a, float(trajectory.behavior_logp[t]))
        td = gamma * v + (float(trajectory.rewards[t]) - critic.at(t, x, a))
        v = policy.critic_value(critic, t, x) + rho * td
    return v


def eval_dr(trajectory: Trajectory, theta, gamma: float, critic: Optional[CriticTable] = None,
            bootstrap: bool = False) -> Scalar:
    """Doubly-robust estimate, recursing backwards from the end of the episode:

    V <- Q(x_t, pi(x_t)) + rho_t (r_t + gamma V - Q(x_t, a_t)).

    The tail starts at 0 (the episode ends after T steps) unless
    ``bootstrap`` asks for Q(x_T, pi(x_T)).
    """
    policy = as_policy(theta)
    critic = _default_critic(policy, critic)
    return _dr_recursion(policy, trajectory, gamma, critic, bootstrap, policy.ratio)


def eval_dr_truncated(trajectory: Trajectory, theta, gamma: float,
                      critic: Optional[CriticTable] = None, rho_bar: float = 1.0,
                      bootstrap: bool = False) -> Scalar:
    """DR with ratios clipped to min(rho, rho_bar).

    At and above the clip level the ratio is the constant rho_bar, so its
    derivatives vanish (ties go to the constant branch).
    """
    if not rho_bar > 0:
        raise ValueError("rho_bar must be positive")
    policy = as_policy(theta)
    critic = _default_critic(policy, critic)

    def clipped(x, a, logp):
        rho = policy.ratio(x, a, logp)
        if t2.value_of(rho) >= rho_bar:
            return float(rho_bar)
        return rho

    return _dr_recursion(policy, trajectory, gamma, critic, bootstrap, clipped)


def _taypo_parts(policy, trajectory, gamma, critic, order, bootstrap):
    """Return (first-order estimate, second-order increment) for orders <= 2."""
    qhat = tail_returns(trajectory, gamma, critic, bootstrap)
    base = _lift(policy, qhat[0])
    if order == 0:
        return base, None
    T = len(trajectory)
    centred = [r - 1.0 for r in _ratios(policy, trajectory)]
    weights = gamma ** np.arange(T) * qhat
    first = base
    for t in range(T):
        first = first + centred[t] * float(weights[t])
    if order == 1:
        return first, None
    # sum_{t<s} gamma^s (rho_t-1)(rho_s-1) Q_s via suffix sums, O(T)
    second = _zero_like(policy)
    suffix = _zero_like(policy)
    for t in range(T - 1, -1, -1):
        second = second + centred[t] * suffix
        suffix = suffix + centred[t] * float(weights[t])
    return first, second


def eval_taypo(trajectory: Trajectory, theta, gamma: float, critic: Optional[CriticTable] = None,
               order: int = 2, bootstrap: bool = False) -> Scalar:
    """TayPO-K estimate for K in {0, 1, 2}.

    K=0 is the behaviour return; K=1 adds sum_t gamma^t (rho_t - 1) Qhat_t;
    K=2 further adds sum_{t<s} gamma^s (rho_t - 1)(rho_s - 1) Qhat_s.
    Qhat are tail returns of the behaviour trajectory and carry no theta.
    """
    if order > 2:
        raise ValueError("eval_taypo supports order <= 2; use eval_taypo_subsampled for higher orders")
    if order < 0:
        raise ValueError("order must be >= 0")
    policy = as_policy(theta)
    first, second = _taypo_parts(policy, trajectory, gamma, critic, order, bootstrap)
    return first if second is None else first + second


def taypo_double_sum(trajectory: Trajectory, theta, gamma: float) -> Scalar:
    """Second-order TayPO increment as the literal O(T^2) double sum."""
    policy = as_policy(theta)
    qhat = tail_returns(trajectory, gamma)
    centred = [r - 1.0 for r in _ratios(policy, trajectory)]
    total = _zero_like(policy)
    T = len(trajectory)
    for t in range(T):
        for s in range(t + 1, T):
            total = total + centred[t] * centred[s] * float(gamma**s * qhat[s])
    return total


def eval_mixture(trajectory: Trajectory, theta, gamma: float, critic: Optional[CriticTable] = None,
                 beta: float = 0.3, bootstrap: bool = False) -> Scalar:
    """Convex blend (1 - beta) * TayPO-1 + beta * TayPO-2."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    policy = as_policy(theta)
    first, second = _taypo_parts(policy, trajectory, gamma, critic, 2, bootstrap)
    return (1.0 - beta) * first + beta * (first + second)


def sample_increment_times(order: int, gamma: float, num_chains: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Draw increasing times t_1 < ... < t_K per chain.

    t_1 ~ Geometric on {0, 1, ...} with P(t) = (1 - gamma) gamma^t, and each
    later gap t_{i+1} - t_i - 1 has the same law, so the joint probability of
    a tuple is (1 - gamma)^K gamma^(t_K - K + 1).
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("sub-sampling needs 0 < gamma < 1")
    steps = rng.geometric(1.0 - gamma, size=(num_chains, order))
    return np.cumsum(steps, axis=1) - 1


def eval_taypo_subsampled(trajectory: Trajectory, theta, gamma: float,
                          critic: Optional[CriticTable] = None, order: int = 2,
                          num_chains: int = 1, rng: Optional[np.random.Generator] = None,
                          bootstrap: bool = False):
    """Linear-time TayPO-K: each increment U_k is estimated from randomly
    sub-sampled time tuples instead of the full O(T^k) sum.

    Returns ``(estimate, increments)`` where ``increments[k-1]`` estimates U_k
    and ``estimate = Qhat_0 + sum_k increments[k-1]``.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    policy = as_policy(theta)
    qhat = tail_returns(trajectory, gamma, critic, bootstrap)
    T = len(trajectory)
    centred = [r - 1.0 for r in _ratios(policy, trajectory)]
    increments = []
    for k in range(1, order + 1):
        weight = gamma ** (k - 1) / (1.0 - gamma) ** k
        times = sample_increment_times(k, gamma, num_chains, rng)
        acc = _zero_like(policy)
        for row in times:
            if row[-1] >= T:
                continue
            term = centred[row[0]]
            for s in row[1:]:
                term = term * centred[s]
            acc = acc + term * float(qhat[row[-1]])
        increments.append(acc * (weight / num_chains))
    estimate = _lift(policy, qhat[0])
    for inc in increments:
        estimate = estimate + inc
    return estimate, increments


# ---------- analytic DR derivatives ----------

def _dr_analytic(trajectory, theta, gamma, critic, bootstrap=False, cross_sign=1.0):
    theta = np.asarray(theta, dtype=float)
    X, A = theta.shape
    D = X * A
    probs = softmax(theta)
    critic = critic if critic is not None else CriticTable.zeros(X, A)

    def q_pi(t, x):
        # Q(x, pi(x)) and its derivatives from closed-form softmax rules
        q = critic.row(t, x)
        p = probs[x]
        block = slice(x * A, x * A + A)
        qbar = float(q @ p)
        grad = np.zeros(D)
        grad[block] = p * (q - qbar)
        hess = np.zeros((D, D))
        c = q - qbar
        hess[block, block] = (
            np.diag(p * c) - np.outer(p * c, p) - np.outer(p, p * c)
        )
        return qbar, grad, hess

    T = len(trajectory)
    if bootstrap:
        v, g, H = q_pi(T, trajectory.final_state)
    else:
        v, g, H = 0.0, np.zeros(D), np.zeros((D, D))
    for t in range(T - 1, -1, -1):
        x, a = int(trajectory.states[t]), int(trajectory.actions[t])
        rho = math.exp(math.log(probs[x, a]) - float(trajectory.behavior_logp[t]))
        delta = float(trajectory.rewards[t]) + gamma * v - critic.at(t, x, a)
        s, s2 = log_policy_derivatives(theta, x, a)
        qv, qg, qH = q_pi(t, x)
        cross = gamma * rho * np.outer(g, s)
        H_new = (
            rho * delta * (s2 + np.outer(s, s))
            + cross_sign * (cross + cross.T)
            + qH
            + gamma * rho * H
        )
        g_new = qg + rho * delta * s + gamma * rho * g
        v = qv + rho * delta
        g, H = g_new, H_new
    return v, g, H


def dr_derivatives_analytic(trajectory: Trajectory, theta: np.ndarray, gamma: float,
                            critic: Optional[CriticTable] = None, bootstrap: bool = False):
    """Value, gradient and Hessian of the DR estimate by explicit backward
    recursions (no automatic differentiation).

    gradient:  g_t = dQ_pi + rho delta s + gamma rho g_{t+1}
    Hessian:   H_t = rho delta (d2 log pi + s s^T) + gamma rho (g_{t+1} s^T + s g_{t+1}^T)
                     + d2Q_pi + gamma rho H_{t+1}
    with s = d log pi(a_t|x_t) and delta = r_t + gamma V_{t+1} - Q(x_t, a_t).
    """
    return _dr_analytic(trajectory, theta, gamma, critic, bootstrap)


# ---------- dispatch ----------

def evaluate(config: EstimatorConfig, trajectory: Trajectory, theta, gamma: float,
             critic: Optional[CriticTable] = None, rng: Optional[np.random.Generator] = None) -> Scalar:
    """Run the estimator selected by ``config`` on one trajectory."""
    kind = config.kind
    if kind == "is":
        return eval_step_is(trajectory, theta, gamma)
    if kind == "dr":
        return eval_dr(trajectory, theta, gamma, critic, config.bootstrap)
    if kind == "truncated-dr":
        return eval_dr_truncated(trajectory, theta, gamma, critic, config.rho_bar, config.bootstrap)
    if kind == "taypo":
        return eval_taypo(trajectory, theta, gamma, critic, config.order, config.bootstrap)
    if kind == "mixture":
        return eval_mixture(trajectory, theta, gamma, critic, config.beta, config.bootstrap)
    if kind == "taypo-subsampled":
        est, _ = eval_taypo_subsampled(trajectory, theta, gamma, critic, config.order,
                                       config.num_chains, rng, config.bootstrap)
        return est
    raise ValueError(f"unknown estimator kind {kind!r}")


def evaluate_batch(config: EstimatorConfig, trajectories: Sequence[Trajectory], theta, gamma: float,
                   critic: Optional[CriticTable] = None,
                   rng: Optional[np.random.Generator] = None) -> Scalar:
    """Mean estimate over a batch, reduced in trajectory order."""
    policy = as_policy(theta)
    return t2.mean(evaluate(config, tr, policy, gamma, critic, rng) for tr in trajectories)


def build_critic(name: str, mdp: TabularMdp, behavior: np.ndarray, theta: np.ndarray,
                 goal: Optional[int] = None, time_indexed: bool = True,
                 table: Optional[np.ndarray] = None) -> CriticTable:
    """Construct a critic by name: ``zero``, ``exact-q-mu``, ``exact-q-pi`` or ``custom``."""
    from .oracle import exact_q_by_time

    if name == "zero":
        return CriticTable.zeros(mdp.num_states, mdp.num_actions)
    if name == "custom":
        if table is None:
            raise ValueError("custom critic needs a table")
        return CriticTable(table)
    if name == "exact-q-mu":
        policy = np.asarray(behavior, dtype=float)
    elif name == "exact-q-pi":
        policy = softmax(theta)
    else:
        raise ValueError(f"unknown critic {name!r}")
    q, _ = exact_q_by_time(mdp, policy, goal)
    return CriticTable(q if time_indexed else q[0])
