"""Seeded sweeps over off-policyness and sample size, plus the exactness suite.

Every cell (sweep value, seed index) owns an RNG substream keyed by
``(master_seed, axis code, grid index, seed index)``.  Cells run in a process
pool but results are reduced in grid order, so the CSV bytes do not depend on
the worker count.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import taylor2 as t2
from .estimators import (
    CRITICS,
    CriticTable,
    EstimatorConfig,
    TargetPolicy,
    _dr_analytic,
    build_critic,
    evaluate_batch,
)
from .mdp import (
    TabularMdp,
    generate_random_mdp,
    l1_distance,
    make_offpolicy_pair,
    sample_trajectories,
    softmax,
)
from .oracle import (
    exact_expected_estimate,
    exact_increments,
    exact_value_dp,
    exact_value_enumeration,
)

CSV_COLUMNS = (
    "sweep_axis", "sweep_value", "seed", "estimator", "critic", "derivative_order",
    "accuracy", "n_samples", "epsilon_mixture", "l1_distance",
)
AXES = ("epsilon", "num_samples")
DEFAULT_ESTIMATORS = ("step-is", "dr", "truncated-dr", "taypo-1", "taypo-2")
DEFAULT_EPSILON_GRID = tuple(round(0.1 * i, 1) for i in range(10))
DEFAULT_N_GRID = (10, 30, 100, 300, 1000, 3000)


def accuracy(estimate, truth) -> float:
    """Cosine similarity of two flattened tensors.

    A zero estimate scores 0 (with a warning); a zero truth is an error.
    """
    x = np.asarray(estimate, dtype=float).ravel()
    y = np.asarray(truth, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    ny = float(np.linalg.norm(y))
    if ny == 0.0:
        raise ValueError("true derivative tensor is identically zero")
    nx = float(np.linalg.norm(x))
    if nx == 0.0:
        warnings.warn("estimate has zero norm; accuracy set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


@dataclass(frozen=True)
class ExperimentConfig:
    num_states: int = 10
    num_actions: int = 5
    alpha_dirichlet: float = 0.001
    gamma: float = 0.8
    horizon: int = 20
    start_state: int = 0
    sweep_axis: str = "epsilon"
    epsilon_grid: tuple = DEFAULT_EPSILON_GRID
    n_grid: tuple = DEFAULT_N_GRID
    num_samples: int = 1000
    epsilon: float = 0.5
    estimators: tuple = DEFAULT_ESTIMATORS
    critic: str = "exact-q-mu"
    orders: tuple = (1, 2)
    rho_bar: float = 1.0
    beta: float = 0.3
    num_seeds: int = 10
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("epsilon_grid", "n_grid", "estimators", "orders"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.sweep_axis not in AXES:
            raise ValueError(f"sweep_axis must be one of {AXES}")
        if not self.epsilon_grid or not self.n_grid:
            raise ValueError("sweep grids must be non-empty")
        if any(not 0.0 <= e <= 1.0 for e in self.epsilon_grid) or not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon values must lie in [0, 1]")
        if any(int(n) < 1 for n in self.n_grid) or self.num_samples < 1:
            raise ValueError("sample sizes must be >= 1")
        if self.num_seeds < 1:
            raise ValueError("num_seeds must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.estimators:
            raise ValueError("estimator list is empty")
        if not self.orders or any(m not in (1, 2) for m in self.orders):
            raise ValueError("derivative orders must be drawn from {1, 2}")
        if self.critic not in CRITICS:
            raise ValueError(f"critic must be one of {CRITICS}")
        for name in self.estimators:
            self.estimator_config(name)

    def estimator_config(self, name: str) -> EstimatorConfig:
        return EstimatorConfig.from_name(name, rho_bar=self.rho_bar, beta=self.beta, critic=self.critic)

    def grid(self) -> tuple:
        return self.epsilon_grid if self.sweep_axis == "epsilon" else tuple(int(n) for n in self.n_grid)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


def _cell_mdp(config: ExperimentConfig, seed_index: int) -> TabularMdp:
    # the MDP and pi_d depend on the seed only, so curves along a sweep share them
    seed = np.random.SeedSequence([config.master_seed, seed_index]).generate_state(1)[0]
    return generate_random_mdp(
        config.num_states, config.num_actions, dirichlet_alpha=config.alpha_dirichlet,
        gamma=config.gamma, horizon=config.horizon, seed=int(seed), start_state=config.start_state,
    )


def _cell_task(args):
    config, grid_index, seed_index = args
    axis_code = AXES.index(config.sweep_axis)
    value = config.grid()[grid_index]
    eps = float(value) if config.sweep_axis == "epsilon" else config.epsilon
    n = config.num_samples if config.sweep_axis == "epsilon" else int(value)

    mdp = _cell_mdp(config, seed_index)
    policy_seed = np.random.SeedSequence([config.master_seed, seed_index, 1]).generate_state(1)[0]
    theta, mu, _ = make_offpolicy_pair(mdp, eps, seed=int(policy_seed))
    truth = exact_value_dp(mdp, theta)
    rng = np.random.default_rng(
        np.random.SeedSequence([config.master_seed, axis_code, grid_index, seed_index, 2])
    )
    trajs = sample_trajectories(mdp, mu, n, rng)
    critic = build_critic(config.critic, mdp, mu, theta)
    policy = TargetPolicy(theta)
    dist = l1_distance(softmax(theta), mu)

    out = []
    for est_index, name in enumerate(config.estimators):
        est_cfg = config.estimator_config(name)
        est_rng = np.random.default_rng(
            np.random.SeedSequence([config.master_seed, axis_code, grid_index, seed_index, 3, est_index])
        )
        estimate = evaluate_batch(est_cfg, trajs, policy, mdp.gamma, critic, est_rng)
        for m in config.orders:
            acc = accuracy(estimate.grad, truth.grad) if m == 1 else accuracy(estimate.hess, truth.hess)
            out.append({
                "estimator": name,
                "derivative_order": m,
                "accuracy": acc,
                "n_samples": n,
                "epsilon_mixture": eps,
                "l1_distance": dist,
            })
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _run_sweep(config: ExperimentConfig) -> list[dict]:
    grid = config.grid()
    tasks = [(config, g, s) for g in range(len(grid)) for s in range(config.num_seeds)]
    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_cell_task, tasks))
    else:
        results = [_cell_task(t) for t in tasks]

    rows = []
    for g, value in enumerate(grid):
        per_seed = results[g * config.num_seeds:(g + 1) * config.num_seeds]
        for s, cell in enumerate(per_seed):
            for rec in cell:
                rows.append({"sweep_axis": config.sweep_axis, "sweep_value": value, "seed": s,
                             "critic": config.critic, **rec})
        for k, rec in enumerate(per_seed[0]):
            accs = np.array([cell[k]["accuracy"] for cell in per_seed])
            mean = float(accs.mean())
            stderr = float(accs.std(ddof=1) / math.sqrt(len(accs))) if len(accs) > 1 else 0.0
            shared = {
                "sweep_axis": config.sweep_axis, "sweep_value": value, "estimator": rec["estimator"],
                "critic": config.critic, "derivative_order": rec["derivative_order"],
                "n_samples": rec["n_samples"], "epsilon_mixture": rec["epsilon_mixture"],
                "l1_distance": float(np.mean([cell[k]["l1_distance"] for cell in per_seed])),
            }
            rows.append({**shared, "seed": "mean", "accuracy": mean})
            rows.append({**shared, "seed": "stderr", "accuracy": stderr})
    return rows


def run_offpolicy_sweep(config: ExperimentConfig) -> list[dict]:
    """Accuracy of each estimator's derivatives across the epsilon grid at fixed N."""
    if config.sweep_axis != "epsilon":
        raise ValueError("run_offpolicy_sweep needs sweep_axis='epsilon'")
    return _run_sweep(config)


def run_sample_sweep(config: ExperimentConfig) -> list[dict]:
    """Accuracy across the N grid at fixed epsilon."""
    if config.sweep_axis != "num_samples":
        raise ValueError("run_sample_sweep needs sweep_axis='num_samples'")
    return _run_sweep(config)


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def summary(rows: Sequence[dict], estimator: str, order: int) -> dict:
    """Map sweep value to (mean, stderr) for one estimator and derivative order."""
    out: dict = {}
    for row in rows:
        if row["estimator"] != estimator or row["derivative_order"] != order:
            continue
        if row["seed"] in ("mean", "stderr"):
            out.setdefault(row["sweep_value"], {})[row["seed"]] = row["accuracy"]
    return {k: (v["mean"], v["stderr"]) for k, v in out.items()}


GNUPLOT_TEMPLATE = """\
# usage: gnuplot -e "csv='{csv}'" {script}
if (!exists("csv")) csv = '{csv}'
set datafile separator ','
set key outside
set xlabel '{xlabel}'
set ylabel 'accuracy'
set yrange [-0.05:1.05]
{logscale}
order = {order}
plot for [est in '{estimators}'] csv using \\
    (strcol(3) eq 'mean' && strcol(4) eq est && $6 == order ? $2 : 1/0):7 \\
    with linespoints title est
"""


def gnuplot_script(config: ExperimentConfig, csv_path: str, order: int = 2, script: str = "plot.gp") -> str:
    """A gnuplot script plotting mean accuracy per estimator from the sweep CSV."""
    return GNUPLOT_TEMPLATE.format(
        csv=csv_path, script=script,
        xlabel="epsilon" if config.sweep_axis == "epsilon" else "N",
        logscale="set logscale x" if config.sweep_axis == "num_samples" else "",
        order=order, estimators=" ".join(config.estimators),
    )


# ---------- exactness suite ----------

def _suite_mdp(seed: int = 7, num_states: int = 3, num_actions: int = 2, horizon: int = 4,
               gamma: float = 0.8) -> TabularMdp:
    return generate_random_mdp(num_states, num_actions, dirichlet_alpha=1.0, gamma=gamma,
                               horizon=horizon, seed=seed)


def _max_err(report, truth) -> float:
    return float(max(np.max(np.abs(report.grad - truth.grad)), np.max(np.abs(report.hess - truth.hess))))


def check_dp_enumeration() -> dict:
    mdp = _suite_mdp()
    theta = np.random.default_rng(0).normal(size=(mdp.num_states, mdp.num_actions))
    dp = exact_value_dp(mdp, theta)
    en = exact_value_enumeration(mdp, theta)
    err = max(abs(dp.value - en.value), _max_err(dp, en))
    return {"name": "oracle-dp-vs-enumeration", "max_error": err, "tolerance": 1e-10}


def check_dr_unbiased() -> dict:
    mdp = _suite_mdp()
    rng = np.random.default_rng(1)
    cfg = EstimatorConfig(kind="dr")
    errs = []
    theta = rng.normal(size=(mdp.num_states, mdp.num_actions))
    cases = [(theta, softmax(theta))]
    for eps in (0.3, 0.7):
        th, mu, _ = make_offpolicy_pair(mdp, eps, seed=3)
        cases.append((th, mu))
    for th, mu in cases:
        truth = exact_value_dp(mdp, th)
        critic = build_critic("exact-q-mu", mdp, mu, th)
        errs.append(_max_err(exact_expected_estimate(mdp, th, mu, cfg, critic), truth))
    return {"name": "dr-unbiased", "max_error": max(errs), "tolerance": 1e-8}


def check_taypo_on_policy() -> dict:
    mdp = _suite_mdp()
    theta = np.random.default_rng(2).normal(size=(mdp.num_states, mdp.num_actions))
    mu = softmax(theta)
    truth = exact_value_dp(mdp, theta)
    critic = build_critic("exact-q-mu", mdp, mu, theta)
    e1 = exact_expected_estimate(mdp, theta, mu, EstimatorConfig(kind="taypo", order=1), critic)
    e2 = exact_expected_estimate(mdp, theta, mu, EstimatorConfig(kind="taypo", order=2), critic)
    err = max(float(np.max(np.abs(e1.grad - truth.grad))), float(np.max(np.abs(e2.hess - truth.hess))))
    gap = float(np.linalg.norm(e1.hess - truth.hess))
    return {"name": "taypo-on-policy", "max_error": err, "tolerance": 1e-8,
            "taypo1_hessian_gap": gap, "gap_threshold": 1e-4, "extra_ok": gap > 1e-4}


def check_dr_recursion(cross_sign: float = 1.0, num_mdps: int = 5, per_mdp: int = 20) -> dict:
    err = 0.0
    for k in range(num_mdps):
        mdp = _suite_mdp(seed=100 + k, num_states=4, num_actions=3, horizon=6)
        rng = np.random.default_rng(200 + k)
        theta = rng.normal(size=(mdp.num_states, mdp.num_actions))
        mu = softmax(rng.normal(size=theta.shape))
        critic = CriticTable(rng.normal(size=(mdp.horizon, mdp.num_states, mdp.num_actions)))
        for tr in sample_trajectories(mdp, mu, per_mdp, rng):
            auto = evaluate_batch(EstimatorConfig(kind="dr"), [tr], theta, mdp.gamma, critic)
            v, g, h = _dr_analytic(tr, theta, mdp.gamma, critic, cross_sign=cross_sign)
            err = max(err, abs(v - auto.value), float(np.max(np.abs(g - auto.grad))),
                      float(np.max(np.abs(h - auto.hess))))
    return {"name": "dr-recursion-vs-autodiff", "max_error": err, "tolerance": 1e-10}


def check_residual_decay(max_order: int = 6) -> dict:
    mdp = _suite_mdp(seed=11, num_states=2, num_actions=2, horizon=4, gamma=0.5)
    theta, mu, _ = make_offpolicy_pair(mdp, 0.5, seed=5)
    v = exact_value_dp(mdp, theta).value
    partial = np.cumsum(exact_increments(mdp, theta, mu, max_order))
    residual = np.abs(v - partial)
    monotone = bool(np.all(np.diff(residual) <= 1e-15))
    return {"name": "taylor-residual-decay", "max_error": float(residual[mdp.horizon]), "tolerance": 1e-6,
            "residuals": residual.tolist(), "extra_ok": monotone,
            "l1_distance": l1_distance(softmax(theta), mu), "radius": (1 - mdp.gamma) / mdp.gamma}


def check_tmaml() -> dict:
    from .mdp import make_goal_bandit
    from .tmaml import expected_cross_term, expected_tmaml_hessian

    bandit = make_goal_bandit(num_actions=2, horizon=1, gamma=1.0)
    hess = expected_tmaml_hessian(bandit, np.zeros((1, 2)), np.ones(1))
    err = float(np.max(np.abs(hess - np.array([[0.5, -0.5], [-0.5, 0.5]]))))
    mdp = _suite_mdp(seed=13, num_states=2, num_actions=2, horizon=3)
    theta = np.random.default_rng(4).normal(size=(2, 2))
    cross = float(np.max(np.abs(expected_cross_term(mdp, theta, np.ones(2)))))
    norm = float(np.linalg.norm(expected_tmaml_hessian(mdp, theta, np.ones(2))))
    return {"name": "tmaml-hessian-bias", "max_error": max(err, cross), "tolerance": 1e-10,
            "frobenius_norm": norm, "extra_ok": norm > 1e-3}


MUTATIONS = ("cross-sign",)


def run_validation_suite(mutation: Optional[str] = None) -> dict:
    """Run every enumeration-based exactness check and report pass/fail.

    ``mutation="cross-sign"`` flips the sign of the cross terms in the
    analytic DR Hessian recursion; the recursion check must then fail.
    """
    if mutation is not None and mutation not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutation!r}; choose from {MUTATIONS}")
    checks = [
        check_dp_enumeration(),
        check_dr_unbiased(),
        check_taypo_on_policy(),
        check_dr_recursion(cross_sign=-1.0 if mutation == "cross-sign" else 1.0),
        check_residual_decay(),
        check_tmaml(),
    ]
    for c in checks:
        c["passed"] = bool(c["max_error"] <= c["tolerance"] and c.get("extra_ok", True))
    return {"passed": all(c["passed"] for c in checks), "mutation": mutation, "checks": checks}


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
