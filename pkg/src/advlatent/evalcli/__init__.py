"""Experiment runner and reporting: evaluation sets, ASR, experiment templates, exports and the CLI."""

from .experiments import DEFAULTS, TEMPLATES, ExperimentError, resolve_config, roster_deltas, run_cells, run_experiment
from .pipeline import (
    BottleneckSpec,
    EvalError,
    EvalSet,
    TrainSpec,
    adapt_inputs,
    attack_split,
    compute_asr,
    dataset_for,
    eps_grid,
    resplit,
    select_eval_set,
    trained_bottleneck,
    trained_model,
)
from .report import ASRCurve, PlotSpec, ReportBundle, ReportError, curves_from_rows, emit_plots, export_results

__all__ = [
    "ASRCurve",
    "BottleneckSpec",
    "DEFAULTS",
    "EvalError",
    "EvalSet",
    "ExperimentError",
    "PlotSpec",
    "ReportBundle",
    "ReportError",
    "TEMPLATES",
    "TrainSpec",
    "adapt_inputs",
    "attack_split",
    "compute_asr",
    "curves_from_rows",
    "dataset_for",
    "emit_plots",
    "eps_grid",
    "export_results",
    "resolve_config",
    "resplit",
    "roster_deltas",
    "run_cells",
    "run_experiment",
    "select_eval_set",
    "trained_bottleneck",
    "trained_model",
]
