import csv
import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ope_hessian.harness import (
    CSV_COLUMNS,
    ExperimentConfig,
    accuracy,
    gnuplot_script,
    rows_to_csv,
    run_offpolicy_sweep,
    run_sample_sweep,
    run_validation_suite,
    summary,
)

SMALL = dict(num_states=4, num_actions=3, horizon=6, alpha_dirichlet=0.1, num_seeds=3,
             estimators=("step-is", "dr", "taypo-1", "taypo-2"))


def test_accuracy_examples():
    x = np.array([1.0, -2.0, 3.0])
    assert abs(accuracy(x, x) - 1.0) < 1e-15
    assert abs(accuracy(-x, x) + 1.0) < 1e-15
    assert abs(accuracy(2 * x, x) - 1.0) < 1e-15
    assert abs(accuracy([1.0, 0.0], [0.0, 1.0])) < 1e-15
    # Hessians flatten row-major
    assert abs(accuracy(np.eye(2), np.array([[1.0, 0.0], [0.0, 1.0]])) - 1.0) < 1e-15


def test_accuracy_edge_cases():
    with pytest.warns(RuntimeWarning):
        assert accuracy([0.0, 0.0], [1.0, 2.0]) == 0.0
    with pytest.raises(ValueError):
        accuracy([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        accuracy([1.0], [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_accuracy_bounded(x, y):
    if np.linalg.norm(y) == 0:
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = accuracy(x, y)
    assert -1.0 <= a <= 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(epsilon_grid=())
    with pytest.raises(ValueError):
        ExperimentConfig(num_seeds=0)
    with pytest.raises(ValueError):
        ExperimentConfig(orders=(3,))
    with pytest.raises(ValueError):
        ExperimentConfig(estimators=("nope",))
    with pytest.raises(ValueError):
        ExperimentConfig(sweep_axis="gamma")
    with pytest.raises(ValueError):
        ExperimentConfig(epsilon_grid=(1.5,))
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_config_defaults_follow_protocol():
    cfg = ExperimentConfig()
    assert (cfg.num_states, cfg.num_actions, cfg.gamma, cfg.horizon, cfg.num_samples, cfg.num_seeds) == (10, 5, 0.8, 20, 1000, 10)
    assert cfg.epsilon_grid == tuple(round(0.1 * i, 1) for i in range(10))
    assert cfg.n_grid == (10, 30, 100, 300, 1000, 3000)
    assert cfg.estimators == ("step-is", "dr", "truncated-dr", "taypo-1", "taypo-2")
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def small_rows():
    return run_offpolicy_sweep(ExperimentConfig(epsilon_grid=(0.0, 0.5), num_samples=40, **SMALL))


def test_rows_shape(small_rows):
    per_seed = [r for r in small_rows if r["seed"] not in ("mean", "stderr")]
    assert len(per_seed) == 2 * 3 * 4 * 2
    assert len(small_rows) == len(per_seed) + 2 * 2 * 4 * 2
    assert all(-1.0 <= r["accuracy"] <= 1.0 for r in small_rows if r["seed"] != "stderr")
    assert {r["l1_distance"] for r in small_rows if r["sweep_value"] == 0.0} == {0.0}


def test_aggregates_recompute(small_rows):
    for value in (0.0, 0.5):
        for est in SMALL["estimators"]:
            for m in (1, 2):
                accs = [r["accuracy"] for r in small_rows if r["sweep_value"] == value and r["estimator"] == est
                        and r["derivative_order"] == m and isinstance(r["seed"], int)]
                mean, stderr = summary(small_rows, est, m)[value]
                assert abs(mean - np.mean(accs)) < 1e-12
                assert abs(stderr - np.std(accs, ddof=1) / math.sqrt(len(accs))) < 1e-12


def test_csv_format(small_rows):
    text = rows_to_csv(small_rows)
    parsed = list(csv.reader(io.StringIO(text)))
    assert tuple(parsed[0]) == CSV_COLUMNS
    assert len(parsed) == len(small_rows) + 1
    assert {row[2] for row in parsed[1:]} >= {"0", "mean", "stderr"}


def test_rerun_is_byte_identical():
    cfg = ExperimentConfig(epsilon_grid=(0.3,), num_samples=20, **{**SMALL, "num_seeds": 1})
    assert rows_to_csv(run_offpolicy_sweep(cfg)) == rows_to_csv(run_offpolicy_sweep(cfg))


def test_worker_count_does_not_change_output():
    cfg = ExperimentConfig(epsilon_grid=(0.0, 0.4), num_samples=15, **{**SMALL, "num_seeds": 2})
    a = rows_to_csv(run_offpolicy_sweep(cfg))
    b = rows_to_csv(run_offpolicy_sweep(ExperimentConfig(**{**cfg.to_dict(), "workers": 3})))
    assert a == b


def test_single_seed_stderr_is_zero():
    cfg = ExperimentConfig(epsilon_grid=(0.2,), num_samples=10, **{**SMALL, "num_seeds": 1})
    rows = run_offpolicy_sweep(cfg)
    assert all(r["accuracy"] == 0.0 for r in rows if r["seed"] == "stderr")


def test_sample_sweep_single_cell():
    cfg = ExperimentConfig(sweep_axis="num_samples", n_grid=(25,), epsilon=0.5, orders=(2,),
                           **{**SMALL, "num_seeds": 2})
    rows = run_sample_sweep(cfg)
    assert {r["sweep_value"] for r in rows} == {25}
    assert {r["n_samples"] for r in rows} == {25}
    assert {r["epsilon_mixture"] for r in rows} == {0.5}
    assert {r["derivative_order"] for r in rows} == {2}


def test_wrong_axis_rejected():
    with pytest.raises(ValueError):
        run_sample_sweep(ExperimentConfig())
    with pytest.raises(ValueError):
        run_offpolicy_sweep(ExperimentConfig(sweep_axis="num_samples"))


def test_gnuplot_template():
    script = gnuplot_script(ExperimentConfig(sweep_axis="num_samples"), "out.csv", order=2)
    assert "out.csv" in script and "logscale" in script and "taypo-2" in script


def test_validation_suite_passes():
    report = run_validation_suite()
    assert report["passed"]
    names = [c["name"] for c in report["checks"]]
    assert len(names) == len(set(names)) >= 6
    assert all("max_error" in c for c in report["checks"])


def test_mutation_is_caught():
    report = run_validation_suite(mutation="cross-sign")
    assert not report["passed"]
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    assert failed == ["dr-recursion-vs-autodiff"]
    with pytest.raises(ValueError):
        run_validation_suite(mutation="unknown")
