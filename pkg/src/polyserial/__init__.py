"""Robust estimation of polyserial correlation by minimum density power divergence."""
from .estimators import DpdConfig, FitResult, fit, fit_dpd, fit_ml, fit_two_step
from .inference import (confidence_interval, fit_covariance, relative_efficiency, rho_interval,
                        sandwich_covariance)
from .model import Dataset, ParamVector, ScoreSystem, point_polyserial

__all__ = [
    "DpdConfig", "FitResult", "fit", "fit_dpd", "fit_ml", "fit_two_step",
    "confidence_interval", "fit_covariance", "relative_efficiency", "rho_interval",
    "sandwich_covariance",
    "Dataset", "ParamVector", "ScoreSystem", "point_polyserial",
]
__version__ = "0.1.0"
