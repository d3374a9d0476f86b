"""Facial-patch ensemble BMI regression on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .ensemble import EnsembleModel, Prediction, load_bundle, predict_bmi, save_bundle
from .landmarks import DEFAULT_RULES, REGIONS, DegenerateROIError, LandmarkSet
from .model import ModelConfig, PatchModelParams, forward, init_weights, parameter_count

__all__ = [
    "__version__", "EnsembleModel", "Prediction", "load_bundle", "predict_bmi", "save_bundle",
    "DEFAULT_RULES", "REGIONS", "DegenerateROIError", "LandmarkSet",
    "ModelConfig", "PatchModelParams", "forward", "init_weights", "parameter_count",
]
