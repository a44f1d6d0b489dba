"""Experiment plumbing: configs, datasets, run orchestration, CSV logs, plots and the CLI."""
from .config import ConfigError, ExperimentConfig, load
from .runner import run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "load", "run_experiment"]
