"""Federated learning attack/defense simulator with explanation-ordered aggregation."""

from .config import ExperimentConfig, load_config, parse_config
from .sim import emit_reports, prepare, run_experiment

__version__ = "0.1.0"
