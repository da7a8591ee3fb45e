"""Experiment orchestration: configs, runner, metrics, persistence, CLI."""

from .config import RunConfig
from .gridsearch import grid_search
from .metrics import AccMatrix, MetricSet, aggregate, compute_metrics
from .results import RunResult, regenerate, write_results
from .runner import (
    MINI_EXPERIENCE_SIZE,
    SeedRunResult,
    build_stream,
    make_model_spec,
    resolve_dataset,
    run_experiment,
    run_single_seed,
)

__all__ = [
    "MINI_EXPERIENCE_SIZE",
    "AccMatrix",
    "MetricSet",
    "RunConfig",
    "RunResult",
    "SeedRunResult",
    "aggregate",
    "build_stream",
    "compute_metrics",
    "grid_search",
    "make_model_spec",
    "regenerate",
    "resolve_dataset",
    "run_experiment",
    "run_single_seed",
    "write_results",
]
