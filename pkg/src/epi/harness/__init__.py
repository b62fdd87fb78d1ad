"""Simulation harness: data generators, replication engine and CLI."""

from .experiment import ExperimentError, ExperimentResult, ExperimentSpec, aggregate, replicate, run_experiment
from .generators import SCENARIOS, Draw, dist_query_points, generate

__all__ = [
    "SCENARIOS",
    "Draw",
    "ExperimentError",
    "ExperimentResult",
    "ExperimentSpec",
    "aggregate",
    "dist_query_points",
    "generate",
    "replicate",
    "run_experiment",
]
