"""Simulator for conversion-rate modelling under aggregated, privacy-preserving conversion reporting."""

__version__ = "0.1.0"

from .datagen import GenConfig, LogRecord, generate_logs, partition_labels  # noqa: E402
from .evaluator import MetricsReport, optin_sweep, run_setting  # noqa: E402
from .settings import ExperimentSetting, SettingKind  # noqa: E402

__all__ = [
    "GenConfig",
    "LogRecord",
    "generate_logs",
    "partition_labels",
    "MetricsReport",
    "optin_sweep",
    "run_setting",
    "ExperimentSetting",
    "SettingKind",
]
