"""CSV/JSON result files and console tables."""

import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd
from tabulate import tabulate

from app.errors import FormatError
from app.harness.metrics import AccuracyMatrix, AggregateReport, RunRecord, average_doi, final_average_accuracy

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["order_id", "repeat", "absolute_pos", "task_identity", "learning_step", "accuracy"]
FLOAT_FORMAT = "%.4f"

PathLike = Union[str, Path]


def records_to_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    """Long-form table with one row per defined matrix cell, sorted by (order_id, repeat)."""
    rows = [
        {"order_id": record.order_id, "repeat": record.repeat, **cell}
        for record in sorted(records, key=lambda r: (r.order_id, r.repeat))
        for cell in record.matrix.to_rows()
    ]
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def write_records_csv(records: Sequence[RunRecord], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records_to_frame(records).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {len(records)} run records to {path}")
    return path


def read_records_csv(path: PathLike) -> List[RunRecord]:
    """
    Rebuild run records from a results CSV.

    Args:
        path: File written by ``write_records_csv``

    Returns:
        One RunRecord per (order_id, repeat), sorted
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Results file not found: {path}")
    frame = pd.read_csv(path)
    missing = [column for column in CSV_COLUMNS if column not in frame.columns]
    if missing:
        raise FormatError(f"{path} lacks columns {missing}")

    records = []
    for (order_id, repeat), group in frame.groupby(["order_id", "repeat"], sort=True):
        identities = group.drop_duplicates("absolute_pos").sort_values("absolute_pos")
        if list(identities["absolute_pos"]) != list(range(1, len(identities) + 1)):
            raise FormatError(f"run ({order_id}, {repeat}) has gaps in its task positions")
        matrix = AccuracyMatrix([str(name) for name in identities["task_identity"]])
        for row in group.itertuples(index=False):
            matrix.record(int(row.absolute_pos) - 1, int(row.learning_step) - 1, float(row.accuracy))
        if not matrix.complete:
            raise FormatError(f"run ({order_id}, {repeat}) does not cover every learning step")
        records.append(RunRecord(int(order_id), int(repeat), list(matrix.tasks), matrix))
    logger.info(f"Read {len(records)} run records from {path}")
    return records


def write_json(data: Dict, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
    logger.info(f"Wrote {path}")
    return path


def run_summaries(records: Sequence[RunRecord]) -> List[Dict]:
    """Per-run metadata and headline metrics, for ``runs.json``."""
    summaries = []
    for record in sorted(records, key=lambda r: (r.order_id, r.repeat)):
        summaries.append({
            "order_id": record.order_id,
            "repeat": record.repeat,
            "order": record.order,
            "seed": record.seed,
            "config_digest": record.config_digest,
            "wall_time": round(record.wall_time, 3),
            "final_accuracy": round(final_average_accuracy(record.matrix), 4),
            "average_doi": round(average_doi(record.matrix), 4) if record.matrix.n > 1 else None,
        })
    return summaries


def format_aggregate(report: AggregateReport) -> str:
    """Console table of LA and DOI per absolute position."""
    rows = []
    for position, row in report.positions.iterrows():
        doi_cell = "-" if pd.isna(row["doi_mean"]) else f"{row['doi_mean']:.2f} (±{row['doi_std']:.2f})"
        rows.append([int(position), f"{row['la_mean']:.2f} (±{row['la_std']:.2f})", doi_cell, int(row["samples"])])
    table = tabulate(rows, headers=["position", "LA accuracy", "DOI", "runs"], tablefmt="github")
    footer = f"final average accuracy {report.final_accuracy_mean:.2f} (±{report.final_accuracy_std:.2f})"
    if report.average_doi_mean is not None:
        footer += f", average DOI {report.average_doi_mean:.2f} (±{report.average_doi_std:.2f})"
    return f"{table}\n{footer}"


def format_matrix(record: RunRecord) -> str:
    """Accuracy matrix of one run, tasks as rows and learning steps as columns."""
    matrix = record.matrix
    rows = [
        [f"{k + 1}: {matrix.tasks[k]}"] + ["" if np.isnan(v) else f"{v:.2f}" for v in matrix.values[k]]
        for k in range(matrix.n)
    ]
    headers = ["task"] + [f"L{j + 1}" for j in range(matrix.n)]
    return tabulate(rows, headers=headers, tablefmt="github")
