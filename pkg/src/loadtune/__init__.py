"""Metaheuristic hyperparameter tuning for a numpy transformer load forecaster."""

from .data import (DEFAULT_FEATURES, PreparedData, ScalerState, SplitSpec,
                   WindowedDataset, clean, fit_scaler, generate_synthetic,
                   load_csv, make_windows, prepare, split)
from .evo import (Bounds, Candidate, DEConfig, GAConfig, Objective, PSOConfig,
                  de_run, ga_run, pso_run, random_run)
from .forecaster import (ForecastModel, Hyperparams, ModelConfig, TrainReport,
                         build_model, fit, predict, rolling_forecast)
from .metrics import mape, mse
from .tuner import SearchSpace, TuneReport, report_render, tune

__version__ = "0.1.0"
