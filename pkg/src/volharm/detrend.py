"""Removal of normal-ageing effects from volumes and descriptors.

Volumes are detrended against a moving age median; age-dependent descriptors
(NMI and the CNRs) against an ordinary least-squares line in age.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .descriptors import CNR_NAMES, FEATURE_NAMES
from .errors import DegenerateAges, TooFewSamples

__all__ = [
    "AGE_DEPENDENT_FEATURES",
    "VOLUME_KINDS",
    "AgeMedianCurve",
    "DetrendModel",
    "LinearAgeFit",
    "detrend_feature",
    "detrend_volume",
    "fit_age_median",
    "fit_detrend_model",
    "fit_feature_age",
]

VOLUME_KINDS = ("gm", "wm", "wb")
AGE_DEPENDENT_FEATURES = ("nmi",) + CNR_NAMES

MIN_CURVE_SAMPLES = 10


@dataclass(frozen=True)
class AgeMedianCurve:
    grid_ages: np.ndarray
    grid_medians: np.ndarray
    window: float

    def __call__(self, age):
        # np.interp clamps to the end values outside the grid
        return np.interp(age, self.grid_ages, self.grid_medians)

    def to_dict(self) -> dict:
        return {
            "grid_ages": self.grid_ages.tolist(),
            "grid_medians": self.grid_medians.tolist(),
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AgeMedianCurve":
        return cls(
            np.asarray(d["grid_ages"], dtype=float),
            np.asarray(d["grid_medians"], dtype=float),
            float(d["window"]),
        )


def fit_age_median(
    ages: Sequence[float],
    volumes: Sequence[float],
    window: float = 5.0,
    grid_step: float = 1.0,
) -> AgeMedianCurve:
    """Moving median of ``volumes`` over ``|age - a| <= window``.

    The grid runs from the youngest to the oldest sample in steps of
    ``grid_step`` (the oldest age is always a grid point). Grid points with
    an empty window take the value of the nearest non-empty grid point.
    """
    ages = np.asarray(ages, dtype=float)
    volumes = np.asarray(volumes, dtype=float)
    if ages.shape != volumes.shape or ages.ndim != 1:
        raise ValueError("ages and volumes must be 1-d and of equal length")
    if ages.size < MIN_CURVE_SAMPLES:
        raise TooFewSamples(f"need >= {MIN_CURVE_SAMPLES} samples, got {ages.size}")
    if window <= 0 or grid_step <= 0:
        raise ValueError("window and grid_step must be positive")

    lo, hi = ages.min(), ages.max()
    n_steps = int(np.floor((hi - lo) / grid_step + 1e-9))
    grid = lo + grid_step * np.arange(n_steps + 1)
    if hi - grid[-1] > 1e-9 * max(1.0, abs(hi)):
        grid = np.append(grid, hi)

    medians = np.full(grid.size, np.nan)
    for i, a in enumerate(grid):
        inside = np.abs(ages - a) <= window
        if inside.any():
            medians[i] = np.median(volumes[inside])

    filled = ~np.isnan(medians)
    if not filled.all():
        have = np.flatnonzero(filled)
        for i in np.flatnonzero(~filled):
            medians[i] = medians[have[np.argmin(np.abs(have - i))]]
    return AgeMedianCurve(grid, medians, float(window))


def detrend_volume(curve: AgeMedianCurve, age, volume):
    """``volume - curve(age)``, with the curve clamped outside its grid."""
    residual = np.asarray(volume, dtype=float) - curve(age)
    return residual if np.ndim(residual) else float(residual)


@dataclass(frozen=True)
class LinearAgeFit:
    slope: float
    intercept: float
    reference_age: float

    def trend(self, age: Optional[float]) -> float:
        if age is None:
            age = self.reference_age
        return self.slope * age + self.intercept

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "reference_age": self.reference_age}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LinearAgeFit":
        return cls(float(d["slope"]), float(d["intercept"]), float(d["reference_age"]))


def fit_feature_age(ages: Sequence[float], values: Sequence[float]) -> LinearAgeFit:
    ages = np.asarray(ages, dtype=float)
    values = np.asarray(values, dtype=float)
    if ages.size < 3:
        raise TooFewSamples(f"need >= 3 samples, got {ages.size}")
    if np.ptp(ages) == 0:
        raise DegenerateAges("all ages are equal; slope is not identifiable")
    mean_age = ages.mean()
    centered = ages - mean_age
    slope = float(np.dot(centered, values - values.mean()) / np.dot(centered, centered))
    intercept = float(values.mean() - slope * mean_age)
    return LinearAgeFit(slope, intercept, float(mean_age))


def detrend_feature(fit: LinearAgeFit, age: Optional[float], value: float) -> float:
    """Residual of ``value`` about the age line; uses the reference age when ``age`` is None."""
    return float(value) - fit.trend(age)


@dataclass(frozen=True)
class DetrendModel:
    curves: dict[str, AgeMedianCurve]
    feature_fits: dict[str, LinearAgeFit] = field(default_factory=dict)

    def volume_residual(self, kind: str, age, volume):
        return detrend_volume(self.curves[kind], age, volume)

    def detrend_features(self, features: np.ndarray, ages=None) -> np.ndarray:
        """Residualize the age-dependent columns of a (n, 16) or (16,) feature array.

        ``ages`` may be None, a scalar, or an array with NaN marking an
        unknown age; unknown ages fall back to each fit's reference age.
        """
        x = np.array(features, dtype=float, copy=True)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if ages is None:
            ages = np.full(x.shape[0], np.nan)
        ages = np.broadcast_to(np.asarray(ages, dtype=float), (x.shape[0],))
        for name, fit in self.feature_fits.items():
            j = FEATURE_NAMES.index(name)
            a = np.where(np.isnan(ages), fit.reference_age, ages)
            x[:, j] -= fit.slope * a + fit.intercept
        return x[0] if single else x

    def to_dict(self) -> dict:
        return {
            "curves": {k: c.to_dict() for k, c in self.curves.items()},
            "feature_fits": {k: f.to_dict() for k, f in self.feature_fits.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetrendModel":
        return cls(
            {k: AgeMedianCurve.from_dict(v) for k, v in d["curves"].items()},
            {k: LinearAgeFit.from_dict(v) for k, v in d["feature_fits"].items()},
        )


def fit_detrend_model(
    ages: Sequence[float],
    volumes: Mapping[str, Sequence[float]],
    features: Optional[np.ndarray] = None,
    window: float = 5.0,
    grid_step: float = 1.0,
    feature_names: Sequence[str] = AGE_DEPENDENT_FEATURES,
) -> DetrendModel:
    """Fit one median curve per volume kind and one age line per listed feature."""
    curves = {k: fit_age_median(ages, v, window, grid_step) for k, v in volumes.items()}
    fits = {}
    if features is not None:
        features = np.asarray(features, dtype=float)
        for name in feature_names:
            fits[name] = fit_feature_age(ages, features[:, FEATURE_NAMES.index(name)])
    return DetrendModel(curves, fits)
