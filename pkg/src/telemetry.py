"""
Prometheus counters for solves, trials and sweep points
"""
import logging
from pathlib import Path
from typing import Iterable, Union

from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

from models import SolveReport, TrialReport

logger = logging.getLogger(__name__)

REGISTRY = CollectorRegistry(auto_describe=True)

SOLVES = Counter(
    'bisac_solves_total',
    'Conic solves by stage and status',
    ['stage', 'status'],
    registry=REGISTRY,
)
SOLVER_ITERATIONS = Histogram(
    'bisac_solver_iterations',
    'Interior-point iterations per solve',
    buckets=(5, 10, 15, 20, 30, 50, 100, 200),
    registry=REGISTRY,
)
TRIALS = Counter(
    'bisac_trials_total',
    'Monte-Carlo trials by kind',
    ['kind'],
    registry=REGISTRY,
)
GRID_POINTS = Counter(
    'bisac_grid_points_total',
    'Sweep grid points by outcome',
    ['outcome'],
    registry=REGISTRY,
)


def record_solves(stage: str, reports: Iterable[SolveReport]) -> None:
    for report in reports:
        SOLVES.labels(stage=stage, status=report.status.value).inc()
        SOLVER_ITERATIONS.observe(report.iterations)


def record_trials(report: TrialReport) -> None:
    TRIALS.labels(kind=report.kind).inc(report.trials)


def record_grid_point(outcome: str) -> None:
    GRID_POINTS.labels(outcome=outcome).inc()


def write_metrics(path: Union[str, Path]) -> None:
    """Write the registry in the Prometheus text format"""
    write_to_textfile(str(path), REGISTRY)
    logger.info(f"Metrics written to {path}")
