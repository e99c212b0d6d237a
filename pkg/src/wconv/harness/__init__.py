"""Experiment configs, training/sweep loops and result reporting."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .report import MetricReport, emit_report, read_report, render_confusion, strip_wall_clock
from .training import TrainingError, prepare_data, run_training, sweep_alpha

__all__ = [
    "ConfigError", "ExperimentConfig", "load_config", "parse_config",
    "MetricReport", "emit_report", "read_report", "render_confusion", "strip_wall_clock",
    "TrainingError", "prepare_data", "run_training", "sweep_alpha",
]
