"""Experiment harness: configuration, the sweep grid and report emission."""

from .config import DEFAULTS, ExperimentConfig, LabConfigError, load_config
from .pipeline import Lab, Setup, SweepResult, run_config
from .report import emit_report, matched_accuracy_compare, sweep_freeze

__all__ = [
    "DEFAULTS",
    "ExperimentConfig",
    "LabConfigError",
    "load_config",
    "Lab",
    "Setup",
    "SweepResult",
    "run_config",
    "emit_report",
    "matched_accuracy_compare",
    "sweep_freeze",
]
