"""Bayesian LSTM trained with an Ensemble Kalman Filter, used for outlier
detection in windowed text-embedding streams."""

from .errors import ConfigError, DataError, NumericalError, ShapeError
from .lstm_core import LstmShape, LstmState, WeightVector, forward_sequence, step
from .enkf import Ensemble, ObservationModel, analysis_update, ensemble_moments, sample_prior
from .bayes_lstm import (
    PosteriorModel,
    PredictiveDistribution,
    TrainingConfig,
    estimate_noise_variance,
    make_samples,
    predict,
    train,
)
from .outlier_detect import OutlierReport, chi2_critical, detect, mahalanobis_sq

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "NumericalError",
    "ShapeError",
    "LstmShape",
    "LstmState",
    "WeightVector",
    "forward_sequence",
    "step",
    "Ensemble",
    "ObservationModel",
    "analysis_update",
    "ensemble_moments",
    "sample_prior",
    "PosteriorModel",
    "PredictiveDistribution",
    "TrainingConfig",
    "estimate_noise_variance",
    "make_samples",
    "predict",
    "train",
    "OutlierReport",
    "chi2_critical",
    "detect",
    "mahalanobis_sq",
]
