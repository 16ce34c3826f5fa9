"""Descriptor-driven harmonization of multi-scanner brain volumes.

Image descriptors (affine factors, NMI, CNR) computed per scan feed a
sparse Bayesian kernel regressor that learns how much of each age-detrended
volume they explain; subtracting that part removes scanner-induced
variability without using scanner labels.
"""
from .descriptors import FEATURE_NAMES, FeatureVector, assemble_features, cnr, decompose_affine, nmi
from .errors import DataError, NumericalError, VolharmError
from .harmonize import HarmonizationModel, correct, correct_cohort, fit, load_model, save_model
from .records import SubjectRecord

__version__ = "0.1.0"

__all__ = [
    "FEATURE_NAMES",
    "DataError",
    "FeatureVector",
    "HarmonizationModel",
    "NumericalError",
    "SubjectRecord",
    "VolharmError",
    "assemble_features",
    "cnr",
    "correct",
    "correct_cohort",
    "decompose_affine",
    "fit",
    "load_model",
    "nmi",
    "save_model",
]
