"""Experiment orchestration, figures and the command line."""
from .config import ExperimentConfig, desk_hyperparams, preset, resolve
from .pipeline import Experiment, ExperimentReport, StageError, run_experiment
from .render import render_boxplots, render_montage

__all__ = ["Experiment", "ExperimentConfig", "ExperimentReport", "StageError", "desk_hyperparams",
           "preset", "render_boxplots", "render_montage", "resolve", "run_experiment"]
