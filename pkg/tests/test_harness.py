"""Tests for metrics, aggregation, result files, config parsing and the CLI."""

import json

import numpy as np
import pandas as pd
import pytest

from app.errors import ConfigError, ContractError, MetricIndexError, UndefinedMetricError
from app.harness.experiment import (
    ExperimentConfig,
    ExperimentRunner,
    build_tasks,
    load_experiment_config,
    parse_config,
    run_experiment,
    run_seed,
)
from app.harness.metrics import (
    AccuracyMatrix,
    RunRecord,
    aggregate_over_orders,
    average_doi,
    doi,
    la_accuracy,
    order_disparity,
)
from app.harness.reporting import format_aggregate, read_records_csv, write_records_csv
from app.main import main

TINY = {
    "dataset": "synthetic", "hidden": "8", "n_tasks": "3", "synthetic_dims": "6", "train_samples": "60",
    "test_samples": "30", "epochs": "2", "batch_size": "32", "lr": "0.01", "alpha": "1.0",
}


def record(values, order_id=0, repeat=0, tasks=None):
    values = np.asarray(values, dtype=float)
    tasks = tasks or [f"t{i}" for i in range(len(values))]
    return RunRecord(order_id, repeat, tasks, AccuracyMatrix.from_values(tasks, values))


def random_record(rng, n, order_id=0, repeat=0):
    return record(rng.uniform(0, 100, size=(n, n)), order_id, repeat)


def write_config(tmp_path, **values):
    path = tmp_path / "experiment.env"
    path.write_text("# test experiment\n" + "\n".join(f"{k}={v}" for k, v in {**TINY, **values}.items()) + "\n")
    return path


# =============================================================================
# LA / DOI
# =============================================================================

def test_la_first_step_is_first_task_accuracy():
    matrix = record([[90.0, 85.0], [0.0, 80.0]]).matrix
    assert la_accuracy(matrix, 1) == 90.0
    assert la_accuracy(matrix, 2) == pytest.approx(82.5)


def test_la_column_mean():
    matrix = record([[95.0, 90.0], [0.0, 80.0]]).matrix
    assert la_accuracy(matrix, 2) == pytest.approx(85.0)


def test_constant_matrix():
    matrix = record(np.full((4, 4), 63.0)).matrix
    assert [la_accuracy(matrix, k) for k in range(1, 5)] == [63.0] * 4
    assert [doi(matrix, k) for k in range(1, 4)] == [0.0] * 3


def test_la_step_out_of_range():
    matrix = record(np.full((3, 3), 50.0)).matrix
    with pytest.raises(MetricIndexError):
        la_accuracy(matrix, 0)
    with pytest.raises(MetricIndexError):
        la_accuracy(matrix, 4)


def test_doi_is_own_minus_final():
    matrix = record([[90.0, 88.0, 85.0], [0, 70.0, 72.0], [0, 0, 60.0]]).matrix
    assert doi(matrix, 1) == pytest.approx(5.0)
    assert doi(matrix, 2) == pytest.approx(-2.0)
    assert average_doi(matrix) == pytest.approx(1.5)


def test_doi_of_last_task_is_undefined():
    matrix = record(np.full((3, 3), 50.0)).matrix
    with pytest.raises(UndefinedMetricError):
        doi(matrix, 3)


def test_metrics_match_brute_force(rng):
    for _ in range(20):
        n = int(rng.integers(2, 7))
        values = rng.uniform(0, 100, size=(n, n))
        matrix = AccuracyMatrix.from_values([str(i) for i in range(n)], values)
        for k in range(1, n + 1):
            assert la_accuracy(matrix, k) == pytest.approx(sum(values[i, k - 1] for i in range(k)) / k, abs=1e-9)
        for k in range(1, n):
            assert doi(matrix, k) == pytest.approx(values[k - 1, k - 1] - values[k - 1, n - 1], abs=1e-9)


def test_matrix_rejects_upper_cells_and_bad_values():
    matrix = AccuracyMatrix(["a", "b"])
    with pytest.raises(MetricIndexError):
        matrix.record(1, 0, 50.0)
    with pytest.raises(ContractError):
        matrix.record(0, 0, 101.0)


def test_order_disparity():
    a = record([[90.0, 80.0], [0, 70.0]]).matrix
    b = record([[95.0, 60.0], [0, 75.0]]).matrix
    np.testing.assert_allclose(order_disparity(a, b), [20.0, 5.0])
    with pytest.raises(ContractError):
        order_disparity(a, record(np.full((3, 3), 1.0)).matrix)


# =============================================================================
# Aggregation
# =============================================================================

def test_single_record_has_zero_std(rng):
    report = aggregate_over_orders([random_record(rng, 4)])
    assert (report.positions["la_std"] == 0).all()
    assert report.samples == 1 and report.final_accuracy_std == 0


def test_two_records_doi_four_and_six():
    first = record([[90.0, 86.0], [0, 80.0]], order_id=0)
    second = record([[90.0, 84.0], [0, 80.0]], order_id=1)
    report = aggregate_over_orders([first, second])
    assert report.positions.loc[1, "doi_mean"] == pytest.approx(5.0)
    assert report.positions.loc[1, "doi_std"] == pytest.approx(1.0)
    assert pd.isna(report.positions.loc[2, "doi_mean"])


def test_aggregation_ignores_record_order(rng):
    records = [random_record(rng, 3, order_id=i) for i in range(6)]
    forward = aggregate_over_orders(records).positions
    backward = aggregate_over_orders(records[::-1]).positions
    pd.testing.assert_frame_equal(forward, backward, check_exact=False, rtol=0, atol=1e-9)


def test_mean_la_equals_la_of_mean_matrix(rng):
    records = [random_record(rng, 4, order_id=i) for i in range(5)]
    report = aggregate_over_orders(records)
    mean_values = np.mean([r.matrix.values for r in records], axis=0)
    for k in range(1, 5):
        assert report.positions.loc[k, "la_mean"] == pytest.approx(mean_values[:k, k - 1].mean(), abs=1e-9)


def test_mixed_dimensions():
    with pytest.raises(ContractError):
        aggregate_over_orders([record(np.full((2, 2), 1.0)), record(np.full((3, 3), 1.0))])


def test_aggregate_serializes(rng):
    report = aggregate_over_orders([random_record(rng, 3, order_id=i) for i in range(2)])
    data = json.loads(json.dumps(report.to_dict()))
    assert data["samples"] == 2
    assert data["positions"][-1]["doi_mean"] is None
    assert "LA accuracy" in format_aggregate(report)


# =============================================================================
# Result files
# =============================================================================

def test_csv_round_trip_preserves_metrics(tmp_path, rng):
    records = [random_record(rng, 3, order_id=o, repeat=r) for o in range(2) for r in range(2)]
    path = write_records_csv(records, tmp_path / "results.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["order_id", "repeat", "absolute_pos", "task_identity", "learning_step",
                                   "accuracy"]
    assert len(frame) == 4 * 6

    restored = read_records_csv(path)
    assert [(r.order_id, r.repeat) for r in restored] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    for original, back in zip(records, restored):
        for k in range(1, 4):
            assert la_accuracy(back.matrix, k) == pytest.approx(la_accuracy(original.matrix, k), abs=1e-4)
        assert doi(back.matrix, 1) == pytest.approx(doi(original.matrix, 1), abs=1e-4)


# =============================================================================
# Configuration
# =============================================================================

def test_defaults():
    config = parse_config({})
    assert config.alpha == 0.0045 and config.hidden == (400, 400) and config.reinit is True


def test_values_are_typed():
    config = parse_config({"hidden": "32, 16", "reinit": "false", "alpha": "0.7", "orders": "120"})
    assert config.hidden == (32, 16) and config.reinit is False and config.alpha == 0.7 and config.orders == 120


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="alhpa"):
        parse_config({"alhpa": "0.1"})


def test_bad_value_is_named():
    with pytest.raises(ConfigError, match="epochs"):
        parse_config({"epochs": "many"})
    with pytest.raises(ConfigError):
        parse_config({"method": "lwf"})


def test_config_file_and_overrides(tmp_path):
    config = load_experiment_config(write_config(tmp_path), seed=7)
    assert config.seed == 7 and config.n_tasks == 3 and config.hidden == (8,)


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_experiment_config(tmp_path / "none.env")


def test_run_seeds_are_distinct_and_stable():
    seeds = {run_seed(0, order, repeat) for order in range(10) for repeat in range(3)}
    assert len(seeds) == 30
    assert run_seed(0, 2, 1) == run_seed(0, 2, 1)


def test_build_tasks_ids_match_positions():
    tasks = build_tasks(ExperimentConfig(dataset="synthetic", n_tasks=4, train_samples=10, test_samples=4))
    assert [t.task_id for t in tasks] == [0, 1, 2, 3]


# =============================================================================
# Experiments
# =============================================================================

def tiny_config(**overrides):
    values = {**TINY, **{k: str(v) for k, v in overrides.items()}}
    return parse_config(values)


def test_single_run_gives_one_record():
    records, report = ExperimentRunner(tiny_config()).run(shuffled=False)
    assert len(records) == 1 and report.samples == 1
    assert records[0].order == ["syn0", "syn1", "syn2"]


def test_orders_times_repeats(tmp_path):
    records, report = ExperimentRunner(tiny_config(orders=3, repeats=2), output_dir=tmp_path).run()
    assert len(records) == 6 and report.samples == 6
    assert [(r.order_id, r.repeat) for r in records] == [(o, r) for o in range(3) for r in range(2)]
    aggregate = json.loads((tmp_path / "aggregate.json").read_text())
    assert aggregate["samples"] == 6
    assert (tmp_path / "runs.json").exists()


def test_rerun_gives_identical_csv(tmp_path):
    config = tiny_config(orders=2, repeats=1)
    ExperimentRunner(config, output_dir=tmp_path / "a").run()
    ExperimentRunner(config, output_dir=tmp_path / "b").run()
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_pool_matches_serial_execution():
    config = tiny_config(orders=2, repeats=2)
    serial, _ = ExperimentRunner(config, workers=1).run()
    pooled, _ = ExperimentRunner(config, workers=2).run()
    assert [(r.order_id, r.repeat, r.order, r.seed) for r in serial] == \
        [(r.order_id, r.repeat, r.order, r.seed) for r in pooled]
    assert all(a.matrix == b.matrix for a, b in zip(serial, pooled))


# =============================================================================
# CLI
# =============================================================================

def test_cli_run_then_report(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out), "--seed", "1"]) == 0
    assert (out / "results.csv").exists()
    assert main(["report", "--out", str(out)]) == 0
    assert "LA accuracy" in capsys.readouterr().out


def test_cli_reports_config_errors(tmp_path, capsys):
    path = tmp_path / "bad.env"
    path.write_text("alpah=1\n")
    assert main(["shuffle", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "alpah" in capsys.readouterr().err


def test_cli_missing_results(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_run_experiment_from_config_file(tmp_path):
    config = write_config(tmp_path, orders=10, repeats=3)
    records, report = run_experiment(config, output_dir=tmp_path / "out")
    assert len(records) == 30 and report.samples == 30
    frame = pd.read_csv(tmp_path / "out" / "results.csv")
    assert len(frame) == 30 * 6
    assert json.loads((tmp_path / "out" / "aggregate.json").read_text())["samples"] == 30


def test_run_experiment_rejects_unknown_keys(tmp_path):
    path = tmp_path / "typo.env"
    path.write_text("dataset=synthetic\nepsilom=1e-3\n")
    with pytest.raises(ConfigError, match="epsilom"):
        run_experiment(path)


def test_adam_betas_are_config_keys():
    train = parse_config({"beta1": "0.8", "beta2": "0.99"}).train_config(seed=0)
    assert train.beta1 == 0.8 and train.beta2 == 0.99
    with pytest.raises(ConfigError):
        parse_config({"beta2": "1.0"})


def test_cli_rejects_non_integer_worker_count(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LAB_WORKERS", "four")
    assert main(["run", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "out")]) == 2
    assert "LAB_WORKERS" in capsys.readouterr().err


def test_position_stds_match_population_std(rng):
    for _ in range(10):
        n = int(rng.integers(2, 6))
        records = [random_record(rng, n, order_id=i) for i in range(int(rng.integers(2, 9)))]
        positions = aggregate_over_orders(records).positions
        for k in range(1, n + 1):
            las = [r.matrix.values[:k, k - 1].mean() for r in records]
            assert positions.loc[k, "la_mean"] == pytest.approx(np.mean(las), abs=1e-9)
            assert positions.loc[k, "la_std"] == pytest.approx(np.std(las, ddof=0), abs=1e-9)
        for k in range(1, n):
            dois = [r.matrix.values[k - 1, k - 1] - r.matrix.values[k - 1, n - 1] for r in records]
            assert positions.loc[k, "doi_mean"] == pytest.approx(np.mean(dois), abs=1e-9)
            assert positions.loc[k, "doi_std"] == pytest.approx(np.std(dois, ddof=0), abs=1e-9)
