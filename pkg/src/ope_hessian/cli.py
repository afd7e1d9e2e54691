"""Command-line entry point (``ope-hessian`` or ``python -m ope_hessian``).

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

# per-subcommand defaults; the JSON config file sits between these and explicit flags
DEFAULTS = {
    "gen-mdp": dict(num_states=10, num_actions=5, alpha_dirichlet=0.001, gamma=0.8, horizon=20,
                    seed=0, num_goals=None),
    "sweep-offpolicy": dict(num_states=10, num_actions=5, alpha_dirichlet=0.001, gamma=0.8, horizon=20,
                            seed=0, epsilon="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9", num_samples="1000",
                            num_seeds=10, estimators="step-is,dr,truncated-dr,taypo-1,taypo-2",
                            critic="exact-q-mu", order="1,2", rho_bar=1.0, beta=0.3, workers=1),
    "sweep-samples": dict(num_states=10, num_actions=5, alpha_dirichlet=0.001, gamma=0.8, horizon=20,
                          seed=0, epsilon="0.5", num_samples="10,30,100,300,1000,3000",
                          num_seeds=10, estimators="step-is,dr,truncated-dr,taypo-1,taypo-2",
                          critic="exact-q-mu", order="1,2", rho_bar=1.0, beta=0.3, workers=1),
    "tmaml-bias": dict(num_states=2, num_actions=2, alpha_dirichlet=1.0, horizon=3, seed=0, baseline=1.0),
    "plugin-bias": dict(num_states=2, num_actions=2, alpha_dirichlet=1.0, gamma=0.9, horizon=3, seed=0,
                        eta=0.5, num_samples="1,4,16,64", num_seeds=200, exact_inner=False),
    "meta-demo": dict(num_actions=3, num_goals=2, horizon=1, gamma=0.9, seed=0, eta=0.5, alpha=0.5,
                      iterations=200, num_tasks=2, num_samples="20", estimators="dr"),
    "validate": dict(mutation=None),
}


class UsageError(Exception):
    pass


def _floats(text) -> list:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _ints(text) -> list:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise UsageError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


def _names(text) -> list:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser, names: Sequence[str]) -> None:
    spec = {
        "seed": dict(type=int, help="master seed"),
        "num_states": dict(type=int),
        "num_actions": dict(type=int),
        "gamma": dict(type=float),
        "horizon": dict(type=int),
        "alpha_dirichlet": dict(type=float, help="Dirichlet concentration of transition rows"),
        "epsilon": dict(help="mixture coefficient(s), comma-separated"),
        "num_samples": dict(help="trajectory count(s), comma-separated"),
        "num_seeds": dict(type=int),
        "estimators": dict(help="comma-separated, e.g. step-is,dr,taypo-2"),
        "critic": dict(),
        "order": dict(help="derivative order(s): 1, 2 or 1,2"),
        "rho_bar": dict(type=float),
        "beta": dict(type=float),
        "eta": dict(type=float, help="inner step size"),
        "workers": dict(type=int),
        "out": dict(help="output path (stdout if omitted)"),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **spec[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ope-hessian",
                                     description="Off-policy value, gradient and Hessian estimation on tabular MDPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_, common):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="JSON file of option values; flags override it")
        _add_common(p, common)
        return p

    mdp_flags = ["seed", "num_states", "num_actions", "gamma", "horizon", "alpha_dirichlet"]
    p = cmd("gen-mdp", "write a random Dirichlet MDP as JSON", mdp_flags + ["out"])
    p.add_argument("--num-goals", dest="num_goals", type=int, default=None)

    sweep_flags = mdp_flags + ["epsilon", "num_samples", "num_seeds", "estimators", "critic", "order",
                               "rho_bar", "beta", "workers", "out"]
    cmd("sweep-offpolicy", "accuracy vs off-policyness epsilon at fixed N", sweep_flags)
    cmd("sweep-samples", "accuracy vs sample size N at fixed epsilon", sweep_flags)

    p = cmd("tmaml-bias", "exact expected Hessian of the TMAML objective",
            ["seed", "num_states", "num_actions", "horizon", "alpha_dirichlet", "out"])
    p.add_argument("--baseline", type=float, default=None, help="constant baseline value b(x)")

    p = cmd("plugin-bias", "bias of the plug-in meta-gradient vs batch size",
            mdp_flags + ["eta", "num_samples", "num_seeds", "out"])
    p.add_argument("--exact-inner", dest="exact_inner", action="store_true", default=None,
                   help="use the exact inner update (removes the correlation)")

    p = cmd("meta-demo", "outer-loop MAML ascent on a goal bandit",
            ["seed", "num_actions", "gamma", "horizon", "eta", "num_samples", "estimators", "out"])
    p.add_argument("--alpha", type=float, default=None, help="outer learning rate")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--num-tasks", dest="num_tasks", type=int, default=None)
    p.add_argument("--num-goals", dest="num_goals", type=int, default=None,
                   help="goals reward actions 0..G-1; the rest are distractors")

    p = cmd("validate", "run the exactness suite (exit 1 on failure)", ["out"])
    p.add_argument("--mutation", default=None, help="deliberately break a component (cross-sign)")
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    opts = dict(DEFAULTS[args.command])
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        for key, val in doc.items():
            key = key.replace("-", "_")
            if key not in opts and key != "out":
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            opts[key] = val
    for key, val in vars(args).items():
        if key in ("command", "config") or val is None:
            continue
        opts[key] = val
    return opts


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _cmd_gen_mdp(o: dict) -> int:
    from .mdp import generate_random_mdp

    mdp = generate_random_mdp(o["num_states"], o["num_actions"], dirichlet_alpha=o["alpha_dirichlet"],
                              gamma=o["gamma"], horizon=o["horizon"], seed=o["seed"],
                              num_goals=o.get("num_goals"))
    _emit(json.dumps(mdp.to_dict()) + "\n", o.get("out"))
    return EXIT_OK


def _experiment(o: dict, axis: str):
    from .harness import ExperimentConfig

    eps = _floats(o["epsilon"])
    ns = _ints(o["num_samples"])
    if axis == "num_samples" and len(eps) != 1:
        raise UsageError("sweep-samples takes a single --epsilon")
    if axis == "epsilon" and len(ns) != 1:
        raise UsageError("sweep-offpolicy takes a single --num-samples")
    return ExperimentConfig(
        num_states=o["num_states"], num_actions=o["num_actions"], alpha_dirichlet=o["alpha_dirichlet"],
        gamma=o["gamma"], horizon=o["horizon"], sweep_axis=axis,
        epsilon_grid=tuple(eps) if axis == "epsilon" else ExperimentConfig.epsilon_grid,
        n_grid=tuple(ns) if axis == "num_samples" else ExperimentConfig.n_grid,
        num_samples=ns[0], epsilon=eps[0], estimators=tuple(_names(o["estimators"])),
        critic=o["critic"], orders=tuple(_ints(o["order"])), rho_bar=o["rho_bar"], beta=o["beta"],
        num_seeds=o["num_seeds"], master_seed=o["seed"], workers=o["workers"],
    )


def _cmd_sweep(o: dict, axis: str) -> int:
    from .harness import gnuplot_script, rows_to_csv, run_offpolicy_sweep, run_sample_sweep

    config = _experiment(o, axis)
    rows = run_offpolicy_sweep(config) if axis == "epsilon" else run_sample_sweep(config)
    out = o.get("out")
    _emit(rows_to_csv(rows), out)
    if out:
        script = Path(out).with_suffix(".gp")
        script.write_text(gnuplot_script(config, Path(out).name, order=max(config.orders), script=script.name))
    return EXIT_OK


def _cmd_tmaml(o: dict) -> int:
    from .mdp import generate_random_mdp
    from .tmaml import tmaml_bias_report

    mdp = generate_random_mdp(o["num_states"], o["num_actions"], dirichlet_alpha=o["alpha_dirichlet"],
                              gamma=1.0, horizon=o["horizon"], seed=o["seed"])
    theta = np.random.default_rng(o["seed"]).normal(size=(mdp.num_states, mdp.num_actions))
    report = tmaml_bias_report(mdp, theta, np.full(mdp.num_states, float(o["baseline"])))
    _emit(json.dumps(report, indent=2) + "\n", o.get("out"))
    return EXIT_OK


def _cmd_plugin(o: dict) -> int:
    from .mdp import generate_random_mdp
    from .metagrad import MetaConfig, plugin_bias_probe

    mdp = generate_random_mdp(o["num_states"], o["num_actions"], dirichlet_alpha=o["alpha_dirichlet"],
                              gamma=o["gamma"], horizon=o["horizon"], seed=o["seed"])
    theta = np.random.default_rng(o["seed"]).normal(size=(mdp.num_states, mdp.num_actions))
    cfg = MetaConfig(eta=o["eta"], seed=o["seed"], inner_mode="exact" if o["exact_inner"] else "sampled")
    rows = plugin_bias_probe(mdp, theta, cfg, _ints(o["num_samples"]), o["num_seeds"])
    lines = ["B,bias_norm,stderr_norm,num_reps"]
    lines += [f"{r['B']},{r['bias_norm']!r},{r['stderr_norm']!r},{r['num_reps']}" for r in rows]
    _emit("\n".join(lines) + "\n", o.get("out"))
    return EXIT_OK


def _cmd_meta(o: dict) -> int:
    from .estimators import EstimatorConfig
    from .mdp import make_goal_bandit
    from .metagrad import MetaConfig, meta_train_demo, records_to_csv

    mdp = make_goal_bandit(num_actions=o["num_actions"], horizon=o["horizon"], gamma=o["gamma"],
                           num_goals=o["num_goals"])
    names = _names(o["estimators"])
    if len(names) != 1:
        raise UsageError("meta-demo takes a single inner estimator")
    cfg = MetaConfig(eta=o["eta"], alpha=o["alpha"], num_tasks=o["num_tasks"],
                     trajectories_per_task=_ints(o["num_samples"])[0],
                     inner_estimator=EstimatorConfig.from_name(names[0]), seed=o["seed"])
    _emit(records_to_csv(meta_train_demo(mdp, cfg, o["iterations"])), o.get("out"))
    return EXIT_OK


def _cmd_validate(o: dict) -> int:
    from .harness import report_to_json, run_validation_suite

    report = run_validation_suite(mutation=o.get("mutation"))
    _emit(report_to_json(report) + "\n", o.get("out"))
    return EXIT_OK if report["passed"] else EXIT_FAILED


HANDLERS = {
    "gen-mdp": _cmd_gen_mdp,
    "sweep-offpolicy": lambda o: _cmd_sweep(o, "epsilon"),
    "sweep-samples": lambda o: _cmd_sweep(o, "num_samples"),
    "tmaml-bias": _cmd_tmaml,
    "plugin-bias": _cmd_plugin,
    "meta-demo": _cmd_meta,
    "validate": _cmd_validate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return HANDLERS[args.command](_resolve(args))
    except (UsageError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
