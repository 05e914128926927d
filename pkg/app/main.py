"""Command-line entry point: run, shuffle, report and gradcheck."""

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from app.errors import ConfigError, LabError
from app.harness.experiment import run_experiment, summarize
from app.harness.gradcheck import run_gradcheck
from app.harness.reporting import format_aggregate, format_matrix, read_records_csv, write_json

load_dotenv()

logging.basicConfig(
    level=os.getenv("LAB_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m app.main", description="Neuron importance continual-learning lab")
    commands = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=Path, help="flat KEY=value experiment config")
        sub.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sub.add_argument("--out", type=Path, default=None, help="output directory")
        sub.add_argument("--workers", type=int, help="process pool size")
        sub.add_argument("--data-dir", type=Path, help="dataset root (overrides DATA_DIR)")

    experiment_flags(commands.add_parser("run", help="train one sequence in the natural task order"))
    experiment_flags(commands.add_parser("shuffle", help="train many shuffled task orders"))

    report = commands.add_parser("report", help="recompute LA/DOI tables from a results CSV")
    report.add_argument("--out", type=Path, default=None, help="directory holding results.csv")
    report.add_argument("--csv", type=Path, default=None, help="results file (default <out>/results.csv)")

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check of every backward pass")
    gradcheck.add_argument("--seed", type=int, default=0)
    return parser


def _output_dir(args) -> Path:
    return args.out or Path(os.getenv("LAB_OUTPUT_DIR", "output"))


def _env_workers() -> Optional[int]:
    raw = os.getenv("LAB_WORKERS")
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"LAB_WORKERS must be an integer, got {raw!r}") from None


def cmd_experiment(args, shuffled: bool) -> int:
    data_dir = args.data_dir or Path(os.getenv("DATA_DIR", "data"))
    workers = args.workers or _env_workers()
    output_dir = _output_dir(args)

    started = time.perf_counter()
    records, report = run_experiment(args.config, data_dir=data_dir, output_dir=output_dir, shuffled=shuffled,
                                     workers=workers, seed=args.seed)
    if not shuffled:
        print(format_matrix(records[0]))
    print(format_aggregate(report))
    print(f"{len(records)} run(s) in {time.perf_counter() - started:.1f}s, results in {output_dir}")
    return 0


def cmd_report(args) -> int:
    output_dir = _output_dir(args)
    csv_path = args.csv or output_dir / "results.csv"
    records = read_records_csv(csv_path)
    report = summarize(records)
    write_json(report.to_dict(), output_dir / "aggregate.json")
    if len(records) == 1:
        print(format_matrix(records[0]))
    print(format_aggregate(report))
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed)
    print(report.to_table())
    return 0 if report.passed else 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_experiment(args, shuffled=False)
        if args.command == "shuffle":
            return cmd_experiment(args, shuffled=True)
        if args.command == "report":
            return cmd_report(args)
        return cmd_gradcheck(args)
    except (LabError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
