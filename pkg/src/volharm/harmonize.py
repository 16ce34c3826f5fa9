"""Fit-and-correct pipeline.

Fitting learns the age detrending from a reference cohort, then trains one
RVM per tissue to predict the age-detrended GM and WM volumes from the
(age-residualized) descriptors. Correcting a scan subtracts the predicted
descriptor contribution from its raw volumes. Whole-brain volume is by
default the sum of the corrected GM and WM.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import rvm
from .descriptors import FEATURE_NAMES
from .detrend import DetrendModel, fit_detrend_model
from .errors import MissingAge, SchemaMismatch, SchemaVersionMismatch, TooFewSubjects
from .records import SubjectRecord, age_array, feature_matrix

__all__ = [
    "MODEL_FORMAT",
    "MODEL_VERSION",
    "WB_MODES",
    "CorrectedRecord",
    "FitConfig",
    "HarmonizationModel",
    "correct",
    "correct_cohort",
    "fit",
    "load_model",
    "model_from_dict",
    "model_to_dict",
    "save_model",
    "split_cohort",
]

log = logging.getLogger(__name__)

MODEL_FORMAT = "volharm.harmonization_model"
MODEL_VERSION = 1
WB_MODES = ("sum_of_corrected", "direct_model")


def split_cohort(records: Sequence[SubjectRecord], fraction: float, seed: int):
    """Random subject-level split into ``(train, test)``.

    All scans of one subject land on the same side. The number of training
    subjects is ``round(fraction * n_subjects)``, kept within ``[1, n - 1]``.
    Each side keeps the input record order.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    subjects = sorted({r.subject_id for r in records})
    if len(subjects) < 2:
        raise TooFewSubjects(f"need at least 2 subjects to split, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    n_train = min(max(int(round(fraction * len(subjects))), 1), len(subjects) - 1)
    train_ids = {subjects[i] for i in order[:n_train]}
    train = [r for r in records if r.subject_id in train_ids]
    test = [r for r in records if r.subject_id not in train_ids]
    return train, test


@dataclass(frozen=True)
class FitConfig:
    detrend_window: float = 5.0
    detrend_grid_step: float = 1.0
    wb_mode: str = "sum_of_corrected"
    rvm: rvm.TrainConfig = field(default_factory=rvm.TrainConfig)
    # rbf length scales to search; None means the default grid
    rbf_gammas: Optional[Sequence[float]] = None
    min_records: int = 30


@dataclass(frozen=True)
class HarmonizationModel:
    detrend: DetrendModel
    gm_model: rvm.RvmModel
    wm_model: rvm.RvmModel
    wb_model: Optional[rvm.RvmModel] = None
    wb_mode: str = "sum_of_corrected"
    schema: tuple = FEATURE_NAMES
    split_seed: Optional[int] = None
    split_fraction: Optional[float] = None

    def tissue_model(self, tissue: str) -> rvm.RvmModel:
        return {"gm": self.gm_model, "wm": self.wm_model, "wb": self.wb_model}[tissue]


@dataclass(frozen=True)
class CorrectedRecord:
    record: SubjectRecord
    gm_pred: float
    wm_pred: float
    gm_var: float
    wm_var: float
    gm_corr: Optional[float]
    wm_corr: Optional[float]
    wb_corr: Optional[float]
    wb_pred: Optional[float] = None
    wb_var: Optional[float] = None

    def corrected(self, tissue: str) -> Optional[float]:
        return {"gm": self.gm_corr, "wm": self.wm_corr, "wb": self.wb_corr}[tissue]


def _train_tissue(kernel, X, t, cfg: FitConfig) -> rvm.RvmModel:
    if isinstance(kernel, str):
        kernel = rvm.KernelSpec(kernel) if kernel == "linear" else None
    if kernel is None:
        return rvm.train_rbf_grid(X, t, cfg.rbf_gammas, cfg.rvm)
    return rvm.train(kernel, X, t, cfg.rvm)


def fit(
    records: Sequence[SubjectRecord],
    kernel: Union[rvm.KernelSpec, str] = "linear",
    cfg: FitConfig = FitConfig(),
    split_seed: Optional[int] = None,
    split_fraction: Optional[float] = None,
) -> HarmonizationModel:
    """Fit the detrending and the per-tissue regressors on a reference cohort.

    ``kernel`` is a :class:`~volharm.rvm.KernelSpec`, ``"linear"``, or
    ``"rbf"`` (length scale chosen by evidence over ``cfg.rbf_gammas``).
    Every record needs an age and both volumes.
    """
    if cfg.wb_mode not in WB_MODES:
        raise ValueError(f"wb_mode must be one of {WB_MODES}")
    if len(records) < cfg.min_records:
        raise TooFewSubjects(f"need >= {cfg.min_records} training records, got {len(records)}")
    no_age = [r.scan_id for r in records if r.age is None]
    if no_age:
        raise MissingAge(f"{len(no_age)} training records lack age, e.g. {no_age[:3]}")
    no_vol = [r.scan_id for r in records if r.gm_ml is None or r.wm_ml is None]
    if no_vol:
        raise ValueError(f"{len(no_vol)} training records lack volumes, e.g. {no_vol[:3]}")

    ages = age_array(records)
    X_raw = feature_matrix(records)
    volumes = {t: np.array([r.volume(t) for r in records]) for t in ("gm", "wm", "wb")}
    detrend = fit_detrend_model(
        ages, volumes, X_raw, window=cfg.detrend_window, grid_step=cfg.detrend_grid_step
    )
    X = detrend.detrend_features(X_raw, ages)
    targets = {t: detrend.volume_residual(t, ages, volumes[t]) for t in volumes}

    models = {}
    for tissue in ("gm", "wm") + (("wb",) if cfg.wb_mode == "direct_model" else ()):
        models[tissue] = _train_tissue(kernel, X, targets[tissue], cfg)
        meta = models[tissue].training_meta
        log.info(
            "%s: %d relevance vectors, log evidence %.6g, %d iterations%s",
            tissue, models[tissue].n_relevance, meta["log_evidence"], meta["iterations"],
            "" if meta["converged"] else " (not converged)",
        )
    return HarmonizationModel(
        detrend=detrend,
        gm_model=models["gm"],
        wm_model=models["wm"],
        wb_model=models.get("wb"),
        wb_mode=cfg.wb_mode,
        schema=tuple(FEATURE_NAMES),
        split_seed=split_seed,
        split_fraction=split_fraction,
    )


def _check_schema(model: HarmonizationModel, schema: Optional[Sequence[str]]):
    if tuple(model.schema) != tuple(FEATURE_NAMES):
        raise SchemaMismatch(f"model schema {list(model.schema)} differs from {list(FEATURE_NAMES)}")
    if schema is not None and tuple(schema) != tuple(model.schema):
        raise SchemaMismatch(f"input features {list(schema)} do not match model schema")


def _minus(volume, pred):
    return None if volume is None else float(volume - pred)


def correct_cohort(
    model: HarmonizationModel, records: Sequence[SubjectRecord], schema: Optional[Sequence[str]] = None
) -> list:
    """Vectorized :func:`correct` over many records."""
    _check_schema(model, schema)
    if not records:
        return []
    X = model.detrend.detrend_features(feature_matrix(records), age_array(records))
    gm_pred, gm_var = rvm.predict(model.gm_model, X)
    wm_pred, wm_var = rvm.predict(model.wm_model, X)
    if model.wb_mode == "direct_model":
        wb_pred, wb_var = rvm.predict(model.wb_model, X)

    out = []
    for i, r in enumerate(records):
        gm_corr = _minus(r.gm_ml, gm_pred[i])
        wm_corr = _minus(r.wm_ml, wm_pred[i])
        if model.wb_mode == "sum_of_corrected":
            wb_corr = None if gm_corr is None or wm_corr is None else gm_corr + wm_corr
            extra = {}
        else:
            wb_corr = _minus(r.wb_ml, wb_pred[i])
            extra = {"wb_pred": float(wb_pred[i]), "wb_var": float(wb_var[i])}
        out.append(
            CorrectedRecord(
                record=r,
                gm_pred=float(gm_pred[i]),
                wm_pred=float(wm_pred[i]),
                gm_var=float(gm_var[i]),
                wm_var=float(wm_var[i]),
                gm_corr=gm_corr,
                wm_corr=wm_corr,
                wb_corr=wb_corr,
                **extra,
            )
        )
    return out


def correct(model: HarmonizationModel, record: SubjectRecord, schema: Optional[Sequence[str]] = None) -> CorrectedRecord:
    """``corrected = measured - predicted descriptor contribution``, per tissue.

    Age-dependent descriptors are residualized with the record's age, or at
    the training cohort's mean age when the age is unknown.
    """
    return correct_cohort(model, [record], schema)[0]


def model_to_dict(model: HarmonizationModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "schema": list(model.schema),
        "wb_mode": model.wb_mode,
        "split_seed": model.split_seed,
        "split_fraction": model.split_fraction,
        "detrend": model.detrend.to_dict(),
        "gm_model": model.gm_model.to_dict(),
        "wm_model": model.wm_model.to_dict(),
        "wb_model": None if model.wb_model is None else model.wb_model.to_dict(),
    }


_REQUIRED_KEYS = ("format", "version", "schema", "wb_mode", "split_seed", "split_fraction",
                  "detrend", "gm_model", "wm_model", "wb_model")


def model_from_dict(d: dict) -> HarmonizationModel:
    missing = [k for k in _REQUIRED_KEYS if k not in d]
    if missing:
        raise SchemaVersionMismatch(f"model file is missing fields {missing}")
    if d["format"] != MODEL_FORMAT or d["version"] != MODEL_VERSION:
        raise SchemaVersionMismatch(
            f"unsupported model file {d['format']!r} version {d['version']!r}; "
            f"expected {MODEL_FORMAT!r} version {MODEL_VERSION}"
        )
    try:
        return HarmonizationModel(
            detrend=DetrendModel.from_dict(d["detrend"]),
            gm_model=rvm.RvmModel.from_dict(d["gm_model"]),
            wm_model=rvm.RvmModel.from_dict(d["wm_model"]),
            wb_model=None if d["wb_model"] is None else rvm.RvmModel.from_dict(d["wb_model"]),
            wb_mode=d["wb_mode"],
            schema=tuple(d["schema"]),
            split_seed=d["split_seed"],
            split_fraction=d["split_fraction"],
        )
    except (KeyError, TypeError) as exc:
        raise SchemaVersionMismatch(f"malformed model file: missing or invalid {exc}") from None


def save_model(model: HarmonizationModel, path: Union[str, os.PathLike]) -> None:
    """Write the model as JSON. Floats use Python's shortest round-trip repr."""
    text = json.dumps(model_to_dict(model), indent=1, sort_keys=True, allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_model(path: Union[str, os.PathLike]) -> HarmonizationModel:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaVersionMismatch(f"{path}: not a JSON model file ({exc})") from None
    if not isinstance(d, dict):
        raise SchemaVersionMismatch(f"{path}: top level must be an object")
    return model_from_dict(d)
