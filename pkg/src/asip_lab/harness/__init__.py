from .config import EXPERIMENTS, load_config, parse_config
from .experiments import ExperimentFailure, run_experiment
from .reports import Report, emit_report

__all__ = ["EXPERIMENTS", "ExperimentFailure", "Report", "emit_report", "load_config",
           "parse_config", "run_experiment"]
