"""Single-source capture-recapture: population size from zero-truncated counts."""

from .bootstrap import BootControl, BootResult, run_bootstrap
from .diagnostics import (
    dfbeta,
    dfpopsize,
    gof_tests,
    information_criteria,
    marginal_freq,
    pearson_residuals,
    rootogram_data,
)
from .families import CountFamily, available_families, get_family, register_family, unregister_family
from .fitting import ConvergenceWarning, FitControl, FitResult, fit
from .model_frame import Dataset, build_model_frame, read_csv
from .popsize import ModelFit, PopSizeEstimate, estimate_popsize, fit_model, stratify_popsize

__version__ = "0.1.0"

__all__ = [
    "BootControl",
    "BootResult",
    "ConvergenceWarning",
    "CountFamily",
    "Dataset",
    "FitControl",
    "FitResult",
    "ModelFit",
    "PopSizeEstimate",
    "available_families",
    "build_model_frame",
    "dfbeta",
    "dfpopsize",
    "estimate_popsize",
    "fit",
    "fit_model",
    "get_family",
    "gof_tests",
    "information_criteria",
    "marginal_freq",
    "pearson_residuals",
    "read_csv",
    "register_family",
    "rootogram_data",
    "run_bootstrap",
    "stratify_popsize",
    "unregister_family",
]
