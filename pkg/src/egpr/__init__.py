"""Ensemble Gaussian process regression for cross-sectional return prediction."""

from .ensemble import MixingWeights, MixturePrediction, MonthlyGPEnsemble, equal_weights, mix, mse_weights
from .exceptions import (ConfigError, ConvergenceError, DataError, EGPRError, LookAheadError,
                         NumericalError, UndefinedMetricError)
from .gp import FittedGP, GPRegressor, OptimizerConfig, TrainingSet, fit_gp, marginal_log_likelihood, predict
from .kernel import KernelParams, kernel_matrix
from .panel import Panel, RawPanel, SynthConfig, read_panel, synthesize, write_panel
from .portfolio import PortfolioBook, build_portfolios, puw_weights, uw_weights
from .scheduler import ModelCache, PanelSource, RunState, SplitConfig, run, step, sweep

__version__ = "0.1.0"

__all__ = [
    "KernelParams", "kernel_matrix",
    "TrainingSet", "FittedGP", "OptimizerConfig", "fit_gp", "predict", "marginal_log_likelihood",
    "GPRegressor",
    "MixingWeights", "MixturePrediction", "equal_weights", "mse_weights", "mix", "MonthlyGPEnsemble",
    "SplitConfig", "PanelSource", "ModelCache", "RunState", "step", "run", "sweep",
    "RawPanel", "Panel", "SynthConfig", "synthesize", "read_panel", "write_panel",
    "PortfolioBook", "build_portfolios", "uw_weights", "puw_weights",
    "EGPRError", "ConfigError", "DataError", "LookAheadError", "NumericalError",
    "ConvergenceError", "UndefinedMetricError",
]
