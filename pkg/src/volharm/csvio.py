"""CSV reading and writing for cohorts, corrections, ground truth and
per-scan image statistics.

Floats are written with ``repr`` so every value survives a round trip
bit-exactly; absent optional values are empty cells.
"""
from __future__ import annotations

import csv
import math
import os
from typing import Iterable, Optional, Sequence, Union

from .descriptors import (
    DEFAULT_CNR_PAIRS,
    FEATURE_NAMES,
    AffineMatrix,
    FeatureVector,
    StructureStats,
    assemble_features,
    cnr,
    decompose_affine,
)
from .errors import DataError, SchemaMismatch
from .records import SubjectRecord

__all__ = [
    "AFFINE_COLUMNS",
    "COHORT_COLUMNS",
    "CORRECTED_COLUMNS",
    "TRUTH_COLUMNS",
    "RowErrors",
    "features_from_stats",
    "read_cohort",
    "read_stats",
    "write_cohort",
    "write_corrected",
    "write_truth",
]

PathLike = Union[str, os.PathLike]

META_COLUMNS = ("subject_id", "scan_id", "age", "sex", "scanner_id", "field_strength", "te_ms", "tr_ms")
COHORT_COLUMNS = META_COLUMNS + FEATURE_NAMES + ("gm_ml", "wm_ml")
CORRECTED_EXTRA = ("gm_corr_ml", "wm_corr_ml", "wb_corr_ml", "gm_pred_ml", "wm_pred_ml", "gm_var", "wm_var")
CORRECTED_COLUMNS = COHORT_COLUMNS + CORRECTED_EXTRA
TRUTH_COLUMNS = ("scan_id", "true_gm_ml", "true_wm_ml")
AFFINE_COLUMNS = tuple(f"affine_{i}{j}" for i in range(3) for j in range(4))

_FLOAT_META = ("age", "field_strength", "te_ms", "tr_ms")


class RowErrors(DataError):
    """One or more input rows could not be processed; ``errors`` lists them."""

    def __init__(self, message: str, errors: Sequence[str] = ()):
        super().__init__(message)
        self.errors = list(errors)


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"refusing to write non-finite value {value}")
        return repr(value)
    return str(value)


def _read_rows(path: PathLike, required: Iterable[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaMismatch(f"{path}: missing columns {missing}")
        # line 1 is the header
        return header, [(i + 2, row) for i, row in enumerate(reader)]


def _float(row: dict, key: str, optional: bool = False) -> Optional[float]:
    text = (row.get(key) or "").strip()
    if not text:
        if optional:
            return None
        raise ValueError(f"{key} is empty")
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"{key}={text!r} is not a number") from None
    if not math.isfinite(value):
        raise ValueError(f"{key}={text!r} is not finite")
    return value


def _text(row: dict, key: str) -> Optional[str]:
    text = (row.get(key) or "").strip()
    return text or None


def _record(row: dict) -> SubjectRecord:
    subject_id, scan_id = _text(row, "subject_id"), _text(row, "scan_id")
    if subject_id is None or scan_id is None:
        raise ValueError("subject_id and scan_id are required")
    features = FeatureVector.from_array([_float(row, k) for k in FEATURE_NAMES])
    return SubjectRecord(
        subject_id=subject_id,
        scan_id=scan_id,
        features=features,
        gm_ml=_float(row, "gm_ml", optional=True),
        wm_ml=_float(row, "wm_ml", optional=True),
        sex=_text(row, "sex"),
        scanner_id=_text(row, "scanner_id"),
        **{k: _float(row, k, optional=True) for k in _FLOAT_META},
    )


def read_cohort(path: PathLike) -> list:
    """Read a cohort CSV. Only the ids and the 16 feature columns are mandatory."""
    _, rows = _read_rows(path, ("subject_id", "scan_id") + FEATURE_NAMES)
    records, errors = [], []
    for line, row in rows:
        try:
            records.append(_record(row))
        except ValueError as exc:
            errors.append(f"line {line}: {exc}")
    if errors:
        raise RowErrors(f"{path}: {len(errors)} bad row(s); first: {errors[0]}", errors)
    seen = set()
    for r in records:
        if r.scan_id in seen:
            raise DataError(f"{path}: duplicate scan_id {r.scan_id!r}")
        seen.add(r.scan_id)
    return records


def _cohort_cells(r: SubjectRecord) -> list:
    meta = [r.subject_id, r.scan_id, r.age, r.sex, r.scanner_id, r.field_strength, r.te_ms, r.tr_ms]
    return [fmt(v) for v in meta + r.features.as_array().tolist() + [r.gm_ml, r.wm_ml]]


def _write(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_cohort(path: PathLike, records: Sequence[SubjectRecord]) -> None:
    _write(path, COHORT_COLUMNS, (_cohort_cells(r) for r in records))


def write_corrected(path: PathLike, corrected: Sequence) -> None:
    """Write :class:`~volharm.harmonize.CorrectedRecord` rows: input columns plus corrections."""

    def cells(c):
        extra = [c.gm_corr, c.wm_corr, c.wb_corr, c.gm_pred, c.wm_pred, c.gm_var, c.wm_var]
        return _cohort_cells(c.record) + [fmt(v) for v in extra]

    _write(path, CORRECTED_COLUMNS, (cells(c) for c in corrected))


def write_truth(path: PathLike, truth_rows: Iterable) -> None:
    _write(path, TRUTH_COLUMNS, ([s, fmt(g), fmt(w)] for s, g, w in truth_rows))


def read_stats(path: PathLike, cnr_pairs: Sequence[tuple] = DEFAULT_CNR_PAIRS):
    """Read a per-scan image-statistics CSV.

    Returns ``(header, rows)`` with ``rows`` as ``(line_number, dict)``.
    Columns needed: ids, the 12 ``affine_ij`` entries (top 3x4 block,
    row-major), ``nmi``, and ``mean_<label>`` / ``var_<label>`` for every
    label named in ``cnr_pairs``.
    """
    labels = sorted({lab for pair in cnr_pairs for lab in pair})
    moments = [f"{p}_{lab}" for lab in labels for p in ("mean", "var")]
    return _read_rows(path, ("subject_id", "scan_id") + AFFINE_COLUMNS + ("nmi",) + tuple(moments))


def features_from_stats(row: dict, cnr_pairs: Sequence[tuple] = DEFAULT_CNR_PAIRS) -> FeatureVector:
    """Descriptors of one statistics row: affine factors, NMI and the configured CNRs."""
    if len(cnr_pairs) != 6:
        raise ValueError(f"need exactly 6 CNR pairs, got {len(cnr_pairs)}")
    affine = AffineMatrix.from_row_major([_float(row, c) for c in AFFINE_COLUMNS])
    dec = decompose_affine(affine)

    def stats(label):
        return StructureStats(label, _float(row, f"mean_{label}"), _float(row, f"var_{label}"))

    cnrs = [cnr(stats(a), stats(b)) for a, b in cnr_pairs]
    return assemble_features(dec, _float(row, "nmi"), cnrs)


def record_from_stats(row: dict, cnr_pairs: Sequence[tuple] = DEFAULT_CNR_PAIRS) -> SubjectRecord:
    """Cohort record built from a statistics row; metadata and volume columns pass through when present."""
    subject_id, scan_id = _text(row, "subject_id"), _text(row, "scan_id")
    if subject_id is None or scan_id is None:
        raise ValueError("subject_id and scan_id are required")
    return SubjectRecord(
        subject_id=subject_id,
        scan_id=scan_id,
        features=features_from_stats(row, cnr_pairs),
        gm_ml=_float(row, "gm_ml", optional=True),
        wm_ml=_float(row, "wm_ml", optional=True),
        sex=_text(row, "sex"),
        scanner_id=_text(row, "scanner_id"),
        **{k: _float(row, k, optional=True) for k in _FLOAT_META},
    )
