"""Evaluation of harmonization: scanner-wise summaries, descriptor/volume
correlations, and test-retest intra-/inter-scanner errors."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .descriptors import FEATURE_NAMES
from .detrend import DetrendModel
from .errors import IncompleteDesign, LengthMismatch, MissingAge, NoEligibleScanners, TooFewSamples
from .records import SubjectRecord, age_array, feature_matrix
from .stats import TTestResult, paired_t_test

__all__ = [
    "NOT_SPECIFIED",
    "CorrelationMatrix",
    "ScannerSummary",
    "ScannerTable",
    "TestRetestResult",
    "correlation_matrix",
    "format_pooled_table",
    "is_test_retest_layout",
    "pearson_matrix",
    "scanner_summaries",
    "summarize",
    "test_retest",
]

log = logging.getLogger(__name__)

NOT_SPECIFIED = "N.S."
TISSUE_LABELS = {"wm": "WM", "gm": "GM", "wb": "WB"}


@dataclass(frozen=True)
class ScannerSummary:
    scanner_id: str
    n: int
    median: float
    std: float
    q1: float
    q3: float

    def to_dict(self) -> dict:
        return {"scanner_id": self.scanner_id, "n": self.n, "median": self.median,
                "std": self.std, "q1": self.q1, "q3": self.q3}


@dataclass(frozen=True)
class ScannerTable:
    """Per-scanner rows plus the row pooled over every eligible scanner."""

    tissue: str
    scanners: tuple
    pooled: ScannerSummary
    excluded: tuple = ()

    def to_dict(self) -> dict:
        return {
            "tissue": self.tissue,
            "scanners": [s.to_dict() for s in self.scanners],
            "pooled": self.pooled.to_dict(),
            "excluded": list(self.excluded),
        }


def summarize(scanner_id: str, values: Sequence[float]) -> ScannerSummary:
    # sorted so the result does not depend on record order, down to the last bit
    v = np.sort(np.asarray(values, dtype=float))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return ScannerSummary(scanner_id, int(v.size), float(med), std, float(q1), float(q3))


def scanner_summaries(
    records: Sequence[SubjectRecord],
    tissue: str,
    detrend: DetrendModel,
    min_n: int = 10,
    values: Optional[Sequence[float]] = None,
) -> ScannerTable:
    """Median/STD/quartiles of age-detrended volumes for every scanner with >= ``min_n`` scans.

    ``values`` replaces the records' own volumes (e.g. corrected volumes, in
    record order). Records without a scanner id are grouped as ``"N.S."``.
    Scanners are listed in sorted order.
    """
    if values is None:
        values = [r.volume(tissue) for r in records]
    values = np.asarray(values, dtype=float)
    if values.shape != (len(records),):
        raise LengthMismatch("values must align with records")
    keep = ~np.isnan(values)
    ages = age_array(records)
    if np.any(np.isnan(ages[keep])):
        raise MissingAge("age-detrended summaries need every record's age")
    residual = np.full(values.shape, np.nan)
    residual[keep] = detrend.volume_residual(tissue, ages[keep], values[keep])

    groups = defaultdict(list)
    for r, v in zip(records, residual):
        if not np.isnan(v):
            groups[r.scanner_id or NOT_SPECIFIED].append(v)
    eligible = sorted(s for s, g in groups.items() if len(g) >= min_n)
    excluded = sorted(s for s in groups if s not in eligible)
    if not eligible:
        raise NoEligibleScanners(f"no scanner has >= {min_n} scans with a {tissue} volume")
    rows = tuple(summarize(s, groups[s]) for s in eligible)
    pooled = summarize("pooled", np.concatenate([groups[s] for s in eligible]))
    return ScannerTable(tissue, rows, pooled, tuple(excluded))


def format_pooled_table(tables: Mapping[str, Mapping[str, ScannerTable]], tissues=("wm", "gm", "wb")) -> str:
    """Plain-text table of pooled median and STD per row label and tissue.

    ``tables`` maps a row label (``"Original"``, ``"Linear"``, ...) to
    ``{tissue: ScannerTable}``.
    """
    label_w = max([len("Kernel")] + [len(k) for k in tables]) + 2
    head1 = " " * label_w + "".join(f"{TISSUE_LABELS[t]:^18}" for t in tissues)
    head2 = f"{'Kernel':<{label_w}}" + "".join(f"{'Median':>9}{'STD':>9}" for _ in tissues)
    lines = [head1.rstrip(), head2, "-" * len(head2)]
    for label, by_tissue in tables.items():
        cells = []
        for t in tissues:
            if t in by_tissue:
                p = by_tissue[t].pooled
                cells.append(f"{p.median:>9.1f}{p.std:>9.1f}")
            else:
                cells.append(f"{'-':>9}{'-':>9}")
        lines.append(f"{label:<{label_w}}" + "".join(cells))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple
    r: np.ndarray
    zero_variance: tuple = ()

    def get(self, a: str, b: str) -> float:
        return float(self.r[self.names.index(a), self.names.index(b)])

    def to_dict(self) -> dict:
        return {"names": list(self.names), "r": self.r.tolist(), "zero_variance": list(self.zero_variance)}


def pearson_matrix(columns: Mapping[str, Sequence[float]]) -> CorrelationMatrix:
    """Pearson correlations between named columns.

    A constant column cannot be correlated; its off-diagonal entries are set
    to 0 and its name is listed in ``zero_variance``.
    """
    names = tuple(columns)
    data = np.array([np.asarray(columns[k], dtype=float) for k in names])
    centered = data - data.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered**2, axis=1))
    flat = norms <= 1e-12 * np.maximum(np.max(np.abs(data), axis=1), 1e-300)
    safe = np.where(flat, 1.0, norms)
    unit = centered / safe[:, None]
    unit[flat] = 0.0
    r = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    zero_var = tuple(n for n, f in zip(names, flat) if f)
    if zero_var:
        log.warning("constant columns in correlation matrix: %s", ", ".join(zero_var))
    return CorrelationMatrix(names, r, zero_var)


def correlation_matrix(records: Sequence[SubjectRecord], detrend: DetrendModel) -> CorrelationMatrix:
    """Correlations between age-detrended volumes and the descriptors.

    Columns: detrended ``gm``, ``wm``, ``wb``; the 16 descriptors with
    NMI/CNR age-residualized; and the display-only products of the three
    per-axis angles, scales and shears.
    """
    if len(records) < 3:
        raise TooFewSamples("need at least 3 records for correlations")
    ages = age_array(records)
    if np.any(np.isnan(ages)):
        raise MissingAge("correlations of age-detrended volumes need every record's age")
    cols = {}
    for t in ("gm", "wm", "wb"):
        cols[t] = detrend.volume_residual(t, ages, np.array([r.volume(t) for r in records], dtype=float))
    x = detrend.detrend_features(feature_matrix(records), ages)
    for j, name in enumerate(FEATURE_NAMES):
        cols[name] = x[:, j]
    cols["angle_product"] = np.prod(x[:, 0:3], axis=1)
    cols["scale_product"] = np.prod(x[:, 3:6], axis=1)
    cols["shear_product"] = np.prod(x[:, 6:9], axis=1)
    return pearson_matrix(cols)


@dataclass(frozen=True)
class TestRetestResult:
    """Intra- and inter-scanner errors of one tissue, one cell per (patient, scanner).

    ``intra`` is ``scan1 - scan2`` within a scanner; ``inter`` is the mean of
    a scanner's scans minus the mean of all the patient's scans on the
    other scanners. Absolute values are the Intra-SE / Inter-SE. When a
    model was supplied, the ``*_corrected`` arrays hold the same quantities
    on corrected volumes and the t-tests pair original against corrected
    absolute errors cell by cell.
    """

    __test__ = False  # not a pytest class

    tissue: str
    patients: tuple
    scanners: tuple
    intra: np.ndarray
    inter: np.ndarray
    intra_corrected: Optional[np.ndarray] = None
    inter_corrected: Optional[np.ndarray] = None
    intra_test: Optional[TTestResult] = None
    inter_test: Optional[TTestResult] = None

    @property
    def intra_se(self) -> np.ndarray:
        return np.abs(self.intra)

    @property
    def inter_se(self) -> np.ndarray:
        return np.abs(self.inter)

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else a.tolist()

        def test(tt):
            return None if tt is None else {"t_statistic": tt.t, "df": tt.df, "p_value": tt.p}

        return {
            "tissue": self.tissue,
            "patients": list(self.patients),
            "scanners": list(self.scanners),
            "intra_signed": arr(self.intra),
            "inter_signed": arr(self.inter),
            "intra_se": arr(self.intra_se),
            "inter_se": arr(self.inter_se),
            "intra_signed_corrected": arr(self.intra_corrected),
            "inter_signed_corrected": arr(self.inter_corrected),
            "intra_se_corrected": None if self.intra_corrected is None else np.abs(self.intra_corrected).tolist(),
            "inter_se_corrected": None if self.inter_corrected is None else np.abs(self.inter_corrected).tolist(),
            "intra_ttest": test(self.intra_test),
            "inter_ttest": test(self.inter_test),
        }


def _design_cells(records: Sequence[SubjectRecord]):
    cells = defaultdict(list)
    for i, r in enumerate(records):
        cells[(r.subject_id, r.scanner_id)].append(i)
    patients = sorted({r.subject_id for r in records})
    scanners = sorted({r.scanner_id for r in records if r.scanner_id is not None})
    missing = []
    if any(r.scanner_id is None for r in records):
        missing.append("records without scanner_id")
    for p in patients:
        for s in scanners:
            n = len(cells.get((p, s), ()))
            if n != 2:
                missing.append(f"{p}/{s}: {n} scans")
    if len(scanners) < 2:
        missing.append(f"only {len(scanners)} scanner(s)")
    index = {}
    for key, idx in cells.items():
        index[key] = sorted(idx, key=lambda i: records[i].scan_id)
    return patients, scanners, index, missing


def is_test_retest_layout(records: Sequence[SubjectRecord]) -> bool:
    """True when every patient has exactly two scans on each of >= 2 shared scanners."""
    if not records:
        return False
    return not _design_cells(records)[3]


def _errors(values: np.ndarray, patients, scanners, index):
    pair = np.array([[values[index[(p, s)]] for s in scanners] for p in patients])  # (P, S, 2)
    intra = pair[:, :, 0] - pair[:, :, 1]
    means = pair.mean(axis=2)
    n_s = len(scanners)
    others = (means.sum(axis=1, keepdims=True) - means) / (n_s - 1)
    return intra, means - others


def test_retest(
    records: Sequence[SubjectRecord],
    tissue: str,
    model=None,
) -> TestRetestResult:
    """Intra-SE and Inter-SE for a patients x scanners x 2 design.

    With a :class:`~volharm.harmonize.HarmonizationModel`, the errors are
    also computed on corrected volumes and paired t-tests compare original
    and corrected absolute errors.
    """
    patients, scanners, index, missing = _design_cells(records)
    if missing:
        raise IncompleteDesign(f"test-retest design is incomplete: {missing[:5]}", missing)
    values = np.array([r.volume(tissue) for r in records], dtype=float)
    if np.any(np.isnan(values)):
        raise IncompleteDesign(f"some records lack a {tissue} volume")
    intra, inter = _errors(values, patients, scanners, index)
    if model is None:
        return TestRetestResult(tissue, tuple(patients), tuple(scanners), intra, inter)

    from .harmonize import correct_cohort

    corrected = np.array([c.corrected(tissue) for c in correct_cohort(model, records)], dtype=float)
    intra_c, inter_c = _errors(corrected, patients, scanners, index)
    return TestRetestResult(
        tissue, tuple(patients), tuple(scanners), intra, inter, intra_c, inter_c,
        intra_test=paired_t_test(np.abs(intra).ravel(), np.abs(intra_c).ravel()),
        inter_test=paired_t_test(np.abs(inter).ravel(), np.abs(inter_c).ravel()),
    )
