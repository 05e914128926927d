"""Experiment configuration, task building and the multi-order runner."""

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import dotenv_values

from app.data.datasets import load_cifar10, load_cifar100, load_mnist
from app.data.tasks import (
    TaskSequence,
    TaskSpec,
    permuted_tasks,
    shuffle_orders,
    split_by_classes,
    split_cifar10_100,
    synthetic_gaussian_tasks,
)
from app.errors import ConfigError
from app.harness.metrics import AggregateReport, RunRecord, aggregate_over_orders, order_disparity
from app.harness.reporting import format_aggregate, run_summaries, write_json, write_records_csv
from app.network.config import NetworkConfig
from app.network.multihead import build_network
from app.training.config import TrainConfig
from app.training.trainer import ContinualTrainer

logger = logging.getLogger(__name__)

DATASETS = ("synthetic", "split_mnist", "permuted_mnist", "split_cifar10", "split_cifar10_100")
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of an experiment; each field is a key of the config file."""

    dataset: str = "synthetic"
    architecture: str = "mlp"
    hidden: Tuple[int, ...] = (400, 400)
    channels: Tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    channel_multiplier: int = 1
    dense_width: int = 256
    shared_head: bool = False
    alpha: float = 0.0045
    epochs: int = 40
    batch_size: int = 256
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    reinit: bool = True
    merge_policy: str = "max"
    epsilon: float = 1e-6
    method: str = "ours"
    si_damping: float = 0.1
    importance_samples: int = 256
    n_tasks: int = 5
    classes_per_task: int = 2
    synthetic_dims: int = 20
    train_samples: int = 500
    test_samples: int = 200
    spread: float = 4.0
    max_train_per_task: int = 0
    max_test_per_task: int = 0
    orders: int = 1
    repeats: int = 1
    exhaustive_orders: bool = False
    unique_orders: bool = False
    pin_first_task: bool = False
    seed: int = 0
    workers: int = 1
    save_checkpoints: bool = False
    export_importance: bool = False

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r} (expected one of {DATASETS})")
        for key in ("orders", "repeats", "workers", "n_tasks", "classes_per_task"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        self.train_config(self.seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=seed,
            beta1=self.beta1, beta2=self.beta2,
            reinit=self.reinit, merge_policy=self.merge_policy, epsilon=self.epsilon, method=self.method,
            si_damping=self.si_damping, importance_samples=self.importance_samples,
            save_checkpoints=self.save_checkpoints, export_importance=self.export_importance,
        )

    def network_config(self, input_shape: Tuple[int, ...], classes: int, seed: int) -> NetworkConfig:
        return NetworkConfig(
            kind=self.architecture, input_shape=tuple(input_shape), hidden=self.hidden, channels=self.channels,
            channel_multiplier=self.channel_multiplier, dense_width=self.dense_width,
            classes_per_head=classes, shared_head=self.shared_head, seed=seed,
        )

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _parse_value(key: str, raw: Optional[str], kind) -> object:
    if raw is None:
        raise ConfigError(f"config key {key!r} has no value")
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in _TRUE | _FALSE:
                raise ValueError(text)
            return lowered in _TRUE
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r} has an invalid value {raw!r}") from None


def parse_config(values: Dict[str, Optional[str]]) -> ExperimentConfig:
    """Build an ExperimentConfig from raw string values; unknown keys are errors."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    parsed = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        parsed[key] = _parse_value(key, raw, known[key])
    return ExperimentConfig(**parsed)


def load_experiment_config(path: Optional[PathLike] = None, **overrides) -> ExperimentConfig:
    """
    Read a flat KEY=value config file.

    Args:
        path: Config file, or None for the defaults
        overrides: Already-typed values that replace file values (e.g. ``seed`` from the CLI)

    Returns:
        Validated ExperimentConfig
    """
    values: Dict[str, Optional[str]] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        values = dict(dotenv_values(path))
    config = parse_config(values)
    overrides = {key: value for key, value in overrides.items() if value is not None}
    if overrides:
        data = asdict(config)
        data.update(overrides)
        config = ExperimentConfig(**data)
    logger.info(f"Loaded experiment config {config.digest()} ({config.dataset}, method={config.method})")
    return config


def _class_groups(config: ExperimentConfig, num_classes: int) -> List[List[int]]:
    needed = config.n_tasks * config.classes_per_task
    if needed > num_classes:
        raise ConfigError(f"{config.n_tasks} tasks of {config.classes_per_task} classes need {needed} classes, "
                          f"the dataset has {num_classes}")
    return [list(range(t * config.classes_per_task, (t + 1) * config.classes_per_task))
            for t in range(config.n_tasks)]


def build_tasks(config: ExperimentConfig, data_dir: PathLike = "data") -> List[TaskSpec]:
    """Task set of the configured dataset; ``task_id`` equals the list position."""
    if config.dataset == "synthetic":
        tasks = synthetic_gaussian_tasks(config.n_tasks, config.synthetic_dims, config.classes_per_task,
                                         config.train_samples, config.test_samples, config.spread, config.seed)
    elif config.dataset == "split_mnist":
        train, test = load_mnist(data_dir)
        tasks = split_by_classes(train, test, _class_groups(config, train.num_classes))
    elif config.dataset == "permuted_mnist":
        train, test = load_mnist(data_dir)
        tasks = permuted_tasks(train, test, config.n_tasks, config.seed)
    elif config.dataset == "split_cifar10":
        train, test = load_cifar10(data_dir)
        tasks = split_by_classes(train, test, _class_groups(config, train.num_classes))
    else:
        tasks = split_cifar10_100(load_cifar10(data_dir), load_cifar100(data_dir), config.n_tasks)

    if config.max_train_per_task or config.max_test_per_task:
        tasks = [task.limited(config.max_train_per_task, config.max_test_per_task) for task in tasks]
    return tasks


def run_seed(master_seed: int, order_id: int, repeat: int) -> int:
    """Seed of run (order_id, repeat) derived from the master seed."""
    return int(np.random.SeedSequence([master_seed, order_id, repeat]).generate_state(1)[0])


@dataclass(frozen=True)
class RunJob:
    config: ExperimentConfig
    order_id: int
    repeat: int
    order: Tuple[int, ...]
    data_dir: str
    artifact_dir: Optional[str] = None


_TASK_CACHE: Dict[Tuple[str, str], List[TaskSpec]] = {}


def _cached_tasks(config: ExperimentConfig, data_dir: str) -> List[TaskSpec]:
    key = (config.digest(), str(data_dir))
    if key not in _TASK_CACHE:
        _TASK_CACHE.clear()
        _TASK_CACHE[key] = build_tasks(config, data_dir)
    return _TASK_CACHE[key]


def execute_run(job: RunJob) -> RunRecord:
    """Train one task order from scratch; runs in the calling process or a pool worker."""
    config = job.config
    tasks = _cached_tasks(config, job.data_dir)
    sequence = [tasks[i] for i in job.order]
    seed = run_seed(config.seed, job.order_id, job.repeat)
    classes = max(task.num_classes for task in sequence)

    started = time.perf_counter()
    network = build_network(config.network_config(sequence[0].input_shape, classes, seed))
    trainer = ContinualTrainer(network, config.train_config(seed), job.artifact_dir)
    matrix = trainer.run_sequence(sequence)
    wall_time = time.perf_counter() - started
    logger.info(f"Run order={job.order_id} repeat={job.repeat} finished in {wall_time:.1f}s")
    return RunRecord(job.order_id, job.repeat, [task.name for task in sequence], matrix,
                     config.digest(), seed, wall_time)


class ExperimentRunner:
    """Builds tasks and orders, executes every (order, repeat) run and writes the reports."""

    def __init__(self, config: ExperimentConfig, data_dir: PathLike = "data",
                 output_dir: Optional[PathLike] = None, workers: Optional[int] = None):
        """
        Initialize the runner.

        Args:
            config: Experiment settings
            data_dir: Dataset root
            output_dir: Where results are written (nothing is written when None)
            workers: Process pool size; defaults to ``config.workers``
        """
        self.config = config
        self.data_dir = str(data_dir)
        self.output_dir = Path(output_dir) if output_dir else None
        self.workers = workers or config.workers

    def tasks(self) -> List[TaskSpec]:
        return _cached_tasks(self.config, self.data_dir)

    def orders(self, shuffled: bool = True) -> List[TaskSequence]:
        tasks = self.tasks()
        if not shuffled:
            return [TaskSequence(order_id=0, tasks=list(tasks), seed=self.config.seed)]
        return shuffle_orders(tasks, self.config.orders, self.config.seed,
                              exhaustive=self.config.exhaustive_orders,
                              unique=self.config.unique_orders,
                              pin_first=self.config.pin_first_task)

    def jobs(self, sequences: Sequence[TaskSequence], repeats: int) -> List[RunJob]:
        jobs = []
        for sequence in sequences:
            for repeat in range(repeats):
                artifact_dir = None
                if self.output_dir and (self.config.save_checkpoints or self.config.export_importance):
                    artifact_dir = str(self.output_dir / "artifacts" / f"order{sequence.order_id}_rep{repeat}")
                jobs.append(RunJob(self.config, sequence.order_id, repeat,
                                   tuple(task.task_id for task in sequence.tasks), self.data_dir, artifact_dir))
        return jobs

    def execute(self, jobs: Sequence[RunJob]) -> List[RunRecord]:
        """Run the jobs serially or on a process pool; results are sorted by (order_id, repeat)."""
        if self.workers > 1 and len(jobs) > 1:
            logger.info(f"Executing {len(jobs)} runs on {self.workers} workers")
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                records = list(pool.map(execute_run, jobs))
        else:
            logger.info(f"Executing {len(jobs)} runs serially")
            records = [execute_run(job) for job in jobs]
        return sorted(records, key=lambda r: (r.order_id, r.repeat))

    def run(self, shuffled: bool = True) -> Tuple[List[RunRecord], AggregateReport]:
        """
        Execute the whole experiment.

        Args:
            shuffled: Multi-order experiment when True; a single run in the natural order when False

        Returns:
            Tuple of (run records, aggregate report)
        """
        try:
            sequences = self.orders(shuffled)
            repeats = self.config.repeats if shuffled else 1
            records = self.execute(self.jobs(sequences, repeats))
            report = summarize(records)
            if self.output_dir is not None:
                write_outputs(records, report, self.output_dir, self.config)
            return records, report
        except Exception as e:
            logger.error(f"Experiment failed: {e}", exc_info=True)
            raise


def run_experiment(config_path: Optional[PathLike], data_dir: PathLike = "data", output_dir: Optional[PathLike] = None,
                   shuffled: bool = True, workers: Optional[int] = None,
                   **overrides) -> Tuple[List[RunRecord], AggregateReport]:
    """
    Load a config file and execute the experiment it describes.

    Args:
        config_path: Flat KEY=value config file (None for the defaults)
        data_dir: Dataset root
        output_dir: Where results.csv, aggregate.json and runs.json go
        shuffled: Run every configured order and repeat, or a single run in the natural order
        workers: Process pool size (defaults to the config value)
        overrides: Typed config values that replace the file's (e.g. ``seed``)

    Returns:
        Tuple of (run records, aggregate report)
    """
    config = load_experiment_config(config_path, **overrides)
    runner = ExperimentRunner(config, data_dir=data_dir, output_dir=output_dir, workers=workers)
    return runner.run(shuffled=shuffled)


def summarize(records: Sequence[RunRecord]) -> AggregateReport:
    """Aggregate report plus the disparity between the first two distinct orders."""
    report = aggregate_over_orders(records)
    firsts = {}
    for record in records:
        firsts.setdefault(record.order_id, record)
    if len(firsts) >= 2:
        first, second = list(firsts.values())[:2]
        report.extra["order_disparity"] = {
            "orders": [first.order_id, second.order_id],
            "values": [round(float(v), 4) for v in order_disparity(first.matrix, second.matrix)],
        }
    return report


def write_outputs(records: Sequence[RunRecord], report: AggregateReport, output_dir: PathLike,
                  config: Optional[ExperimentConfig] = None) -> None:
    output_dir = Path(output_dir)
    write_records_csv(records, output_dir / "results.csv")
    aggregate = report.to_dict()
    if config is not None:
        aggregate["config"] = {"digest": config.digest(), **asdict(config)}
    write_json(aggregate, output_dir / "aggregate.json")
    write_json({"runs": run_summaries(records)}, output_dir / "runs.json")
    logger.info(f"\n{format_aggregate(report)}")
