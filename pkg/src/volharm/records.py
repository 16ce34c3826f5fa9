"""Per-scan records shared by the pipeline, the generator and the CSV layer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .descriptors import FeatureVector


@dataclass(frozen=True)
class SubjectRecord:
    """One scan of one subject.

    Only ``features`` is needed to compute a correction; ``age`` is required
    for records used to fit a model. ``sex`` and the acquisition fields are
    carried through untouched.
    """

    subject_id: str
    scan_id: str
    features: FeatureVector
    gm_ml: Optional[float] = None
    wm_ml: Optional[float] = None
    age: Optional[float] = None
    sex: Optional[str] = None
    scanner_id: Optional[str] = None
    field_strength: Optional[float] = None
    te_ms: Optional[float] = None
    tr_ms: Optional[float] = None

    def __post_init__(self):
        for name in ("gm_ml", "wm_ml"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{self.scan_id}: {name} must be positive, got {v}")

    @property
    def wb_ml(self) -> Optional[float]:
        if self.gm_ml is None or self.wm_ml is None:
            return None
        return self.gm_ml + self.wm_ml

    def volume(self, tissue: str) -> Optional[float]:
        return {"gm": self.gm_ml, "wm": self.wm_ml, "wb": self.wb_ml}[tissue]


def feature_matrix(records) -> np.ndarray:
    return np.array([r.features.as_array() for r in records], dtype=float).reshape(-1, 16)


def age_array(records) -> np.ndarray:
    """Ages as floats with NaN for unknown."""
    return np.array([np.nan if r.age is None else r.age for r in records], dtype=float)
