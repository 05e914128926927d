"""Accuracy matrices and the step-wise metrics derived from them.

Metric functions use 1-based task positions and learning steps, the way the
results are reported; the matrix itself is indexed from 0.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.errors import ContractError, MetricIndexError, StateError, UndefinedMetricError

logger = logging.getLogger(__name__)


class AccuracyMatrix:
    """Lower-triangular grid: cell (k, j) is the accuracy of task k after learning step j."""

    def __init__(self, tasks: Sequence[str]):
        if not tasks:
            raise ContractError("an accuracy matrix needs at least one task")
        self.tasks = list(tasks)
        self.values = np.full((len(self.tasks), len(self.tasks)), np.nan)

    @property
    def n(self) -> int:
        return len(self.tasks)

    def record(self, task_pos: int, step: int, accuracy: float) -> None:
        """Store the accuracy of the task at ``task_pos`` measured after ``step`` (both 0-based)."""
        if not 0 <= task_pos <= step < self.n:
            raise MetricIndexError(f"cell ({task_pos}, {step}) is outside the lower triangle of a {self.n}x{self.n} matrix")
        if not 0.0 <= accuracy <= 100.0:
            raise ContractError(f"accuracy {accuracy} outside [0, 100]")
        self.values[task_pos, step] = accuracy

    def __getitem__(self, cell) -> float:
        return float(self.values[cell])

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values[np.tril_indices(self.n)]).any()

    def column(self, step: int) -> np.ndarray:
        return self.values[: step + 1, step]

    @classmethod
    def from_values(cls, tasks: Sequence[str], values) -> "AccuracyMatrix":
        """Build from a square array; entries above the diagonal are ignored."""
        values = np.asarray(values, dtype=np.float64)
        matrix = cls(tasks)
        if values.shape != (matrix.n, matrix.n):
            raise ContractError(f"values of shape {values.shape} do not fit {matrix.n} tasks")
        for step in range(matrix.n):
            for task_pos in range(step + 1):
                matrix.record(task_pos, step, float(values[task_pos, step]))
        return matrix

    def to_rows(self) -> List[Dict]:
        """One dict per defined cell, with 1-based position and step."""
        return [
            {
                "absolute_pos": task_pos + 1,
                "task_identity": self.tasks[task_pos],
                "learning_step": step + 1,
                "accuracy": float(self.values[task_pos, step]),
            }
            for task_pos in range(self.n)
            for step in range(task_pos, self.n)
        ]

    def __eq__(self, other) -> bool:
        if not isinstance(other, AccuracyMatrix):
            return NotImplemented
        return self.tasks == other.tasks and np.array_equal(self.values, other.values, equal_nan=True)

    def __repr__(self) -> str:
        return f"AccuracyMatrix(tasks={self.tasks})"


def _require_complete_column(matrix: AccuracyMatrix, step: int) -> np.ndarray:
    column = matrix.column(step)
    if np.isnan(column).any():
        raise StateError(f"learning step {step + 1} is not fully evaluated")
    return column


def la_accuracy(matrix: AccuracyMatrix, k: int) -> float:
    """Learning-step-wise average: mean accuracy over tasks 1..k after step k."""
    if not 1 <= k <= matrix.n:
        raise MetricIndexError(f"step {k} outside 1..{matrix.n}")
    return float(np.mean(_require_complete_column(matrix, k - 1)))


def doi(matrix: AccuracyMatrix, k: int) -> float:
    """
    Degree of interference of task k: accuracy right after learning it minus final accuracy.

    Args:
        matrix: Complete accuracy matrix
        k: 1-based task position, k < n

    Returns:
        Accuracy drop in percentage points (negative means backward transfer)
    """
    if k == matrix.n:
        raise UndefinedMetricError(f"task {k} is learned last and has no later steps")
    if not 1 <= k < matrix.n:
        raise MetricIndexError(f"task position {k} outside 1..{matrix.n - 1}")
    own = matrix.values[k - 1, k - 1]
    final = matrix.values[k - 1, matrix.n - 1]
    if np.isnan(own) or np.isnan(final):
        raise StateError(f"task {k} is not fully evaluated")
    return float(own - final)


def average_doi(matrix: AccuracyMatrix) -> float:
    """Mean DOI over positions 1..n-1."""
    if matrix.n < 2:
        raise UndefinedMetricError("average DOI needs at least two tasks")
    return float(np.mean([doi(matrix, k) for k in range(1, matrix.n)]))


def final_average_accuracy(matrix: AccuracyMatrix) -> float:
    return la_accuracy(matrix, matrix.n)


def order_disparity(first: AccuracyMatrix, second: AccuracyMatrix) -> np.ndarray:
    """Absolute final-step accuracy difference per absolute task position between two runs."""
    if first.n != second.n:
        raise ContractError(f"cannot compare a {first.n}-task run with a {second.n}-task run")
    return np.abs(
        _require_complete_column(first, first.n - 1) - _require_complete_column(second, second.n - 1)
    )


@dataclass
class RunRecord:
    """Outcome of training one task order once."""

    order_id: int
    repeat: int
    order: List[str]
    matrix: AccuracyMatrix
    config_digest: str = ""
    seed: int = 0
    wall_time: float = 0.0

    def __post_init__(self):
        if len(self.order) != self.matrix.n:
            raise ContractError(f"order has {len(self.order)} tasks but the matrix has {self.matrix.n}")

    def metrics_frame(self) -> pd.DataFrame:
        """LA and DOI per absolute position (DOI is NaN for the last task)."""
        n = self.matrix.n
        return pd.DataFrame({
            "order_id": self.order_id,
            "repeat": self.repeat,
            "position": np.arange(1, n + 1),
            "la": [la_accuracy(self.matrix, k) for k in range(1, n + 1)],
            "doi": [doi(self.matrix, k) if k < n else np.nan for k in range(1, n + 1)],
        })


@dataclass
class AggregateReport:
    """Population mean/std of LA and DOI per absolute position over every run."""

    positions: pd.DataFrame
    samples: int
    final_accuracy_mean: float
    final_accuracy_std: float
    average_doi_mean: Optional[float] = None
    average_doi_std: Optional[float] = None
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        rows = []
        for position, row in self.positions.iterrows():
            rows.append({
                "absolute_pos": int(position),
                **{key: (None if pd.isna(value) else round(float(value), 4)) for key, value in row.items()
                   if key != "samples"},
                "samples": int(row["samples"]),
            })

        def rounded(value: Optional[float]) -> Optional[float]:
            return None if value is None or pd.isna(value) else round(float(value), 4)

        return {
            "samples": self.samples,
            "positions": rows,
            "final_accuracy": {"mean": rounded(self.final_accuracy_mean), "std": rounded(self.final_accuracy_std)},
            "average_doi": {"mean": rounded(self.average_doi_mean), "std": rounded(self.average_doi_std)},
            **self.extra,
        }


def _population_std(values: pd.Series) -> float:
    return float(values.std(ddof=0))


def aggregate_over_orders(records: Sequence[RunRecord]) -> AggregateReport:
    """
    Aggregate LA and DOI per absolute position over orders and repeats with uniform weights.

    Args:
        records: Runs whose matrices all have the same dimension

    Returns:
        Report with mean and population std per position
    """
    if not records:
        raise ContractError("no run records to aggregate")
    dims = {record.matrix.n for record in records}
    if len(dims) != 1:
        raise ContractError(f"run records mix matrix dimensions {sorted(dims)}")
    n = dims.pop()

    frame = pd.concat([record.metrics_frame() for record in records], ignore_index=True)
    positions = frame.groupby("position").agg(
        la_mean=("la", "mean"),
        la_std=("la", _population_std),
        doi_mean=("doi", "mean"),
        doi_std=("doi", _population_std),
        samples=("la", "size"),
    )

    mean_matrix = AccuracyMatrix.from_values(
        records[0].matrix.tasks, np.mean([record.matrix.values for record in records], axis=0)
    )
    la_of_means = np.array([la_accuracy(mean_matrix, k) for k in range(1, n + 1)])
    if not np.allclose(la_of_means, positions["la_mean"].to_numpy(), rtol=0, atol=1e-9):
        raise ContractError("per-order LA means disagree with the LA of the mean matrix")

    finals = pd.Series([final_average_accuracy(record.matrix) for record in records])
    report = AggregateReport(
        positions=positions,
        samples=len(records),
        final_accuracy_mean=float(finals.mean()),
        final_accuracy_std=_population_std(finals),
    )
    if n > 1:
        averages = pd.Series([average_doi(record.matrix) for record in records])
        report.average_doi_mean = float(averages.mean())
        report.average_doi_std = _population_std(averages)
    logger.info(f"Aggregated {len(records)} runs over {n} task positions")
    return report
