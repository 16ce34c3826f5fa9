"""Evaluation reports: one JSON document, a plain-text rendering, and SVG box plots."""
from __future__ import annotations

import json
import logging
from typing import Optional, Sequence

import numpy as np

from . import evaluate
from .detrend import fit_detrend_model
from .errors import MissingAge, NoEligibleScanners
from .harmonize import HarmonizationModel, correct_cohort
from .records import SubjectRecord, age_array, feature_matrix

__all__ = ["build_report", "render_svg", "render_text", "to_json"]

log = logging.getLogger(__name__)

TISSUES = ("wm", "gm", "wb")


def _kernel_label(model: HarmonizationModel) -> str:
    kind = model.gm_model.kernel.kind
    return "RBF" if kind == "rbf" else kind.capitalize()


def build_report(
    records: Sequence[SubjectRecord],
    model: Optional[HarmonizationModel] = None,
    min_n: int = 10,
    detrend_window: float = 5.0,
) -> dict:
    """Everything the evaluation produces, as plain JSON-ready data.

    Without a model the age detrending is fitted on ``records`` themselves
    and only the original volumes are summarized. Test-retest errors are
    included when the records form a complete patients x scanners x 2
    design.
    """
    if model is not None:
        detrend = model.detrend
    else:
        ages = age_array(records)
        if np.any(np.isnan(ages)):
            raise MissingAge("evaluating without a model needs every record's age")
        volumes = {t: np.array([r.volume(t) for r in records], dtype=float) for t in ("gm", "wm", "wb")}
        detrend = fit_detrend_model(ages, volumes, feature_matrix(records), window=detrend_window)

    report = {"n_records": len(records), "min_scanner_n": min_n, "kernel": None, "tables": {}}
    rows = {"Original": None}
    corrected = None
    if model is not None:
        label = _kernel_label(model)
        report["kernel"] = label
        corrected = correct_cohort(model, records)
        rows[label] = {t: [c.corrected(t) for c in corrected] for t in TISSUES}

    retest = evaluate.is_test_retest_layout(records)
    tables = {}
    try:
        for label, values in rows.items():
            tables[label] = {
                t: evaluate.scanner_summaries(records, t, detrend, min_n, None if values is None else
                                              [np.nan if v is None else v for v in values[t]])
                for t in TISSUES
            }
    except NoEligibleScanners:
        if not retest:
            raise
        log.warning("no scanner reaches %d scans; skipping scanner summaries", min_n)
        tables = {}
    report["tables"] = {label: {t: tab.to_dict() for t, tab in by_t.items()} for label, by_t in tables.items()}
    report["pooled_table_text"] = evaluate.format_pooled_table(tables) if tables else None

    report["correlation"] = evaluate.correlation_matrix(records, detrend).to_dict() if len(records) >= 3 else None

    if retest:
        report["test_retest"] = {t: evaluate.test_retest(records, t, model).to_dict() for t in TISSUES}
    else:
        report["test_retest"] = None
    return report


def to_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _fmt_test(tt: Optional[dict]) -> str:
    if tt is None:
        return "-"
    return f"t = {tt['t_statistic']:.3f}, df = {tt['df']}, p = {tt['p_value']:.3g}"


def render_text(report: dict) -> str:
    out = [f"Records: {report['n_records']}"]
    if report["pooled_table_text"]:
        out += ["", "Pooled age-detrended volumes (mL)", report["pooled_table_text"].rstrip("\n")]
        for label, by_t in report["tables"].items():
            out += ["", f"Per scanner, {label}"]
            out.append(f"{'tissue':<7}{'scanner':<14}{'n':>5}{'median':>9}{'std':>9}{'q1':>9}{'q3':>9}")
            for t in TISSUES:
                for s in by_t[t]["scanners"]:
                    out.append(
                        f"{t.upper():<7}{s['scanner_id']:<14}{s['n']:>5}{s['median']:>9.1f}"
                        f"{s['std']:>9.1f}{s['q1']:>9.1f}{s['q3']:>9.1f}"
                    )
    corr = report["correlation"]
    if corr:
        names = corr["names"]
        r = np.array(corr["r"])
        out += ["", "Correlation of detrended volumes with descriptors (Pearson r)"]
        out.append(f"{'':<15}" + "".join(f"{t.upper():>8}" for t in ("gm", "wm", "wb")))
        for j, name in enumerate(names[3:], start=3):
            out.append(f"{name:<15}" + "".join(f"{r[i, j]:>8.2f}" for i in range(3)))
        if corr["zero_variance"]:
            out.append("constant columns: " + ", ".join(corr["zero_variance"]))
    tr = report["test_retest"]
    if tr:
        out += ["", "Test-retest errors (mL, mean over patients x scanners)"]
        out.append(f"{'tissue':<7}{'Intra-SE':>10}{'corr.':>10}{'Inter-SE':>10}{'corr.':>10}")
        for t in TISSUES:
            d = tr[t]

            def mean(key):
                v = d[key]
                return "-" if v is None else f"{np.mean(v):.2f}"

            out.append(
                f"{t.upper():<7}{mean('intra_se'):>10}{mean('intra_se_corrected'):>10}"
                f"{mean('inter_se'):>10}{mean('inter_se_corrected'):>10}"
            )
        for t in TISSUES:
            d = tr[t]
            if d["intra_ttest"] is not None:
                out.append(f"{t.upper()} Intra-SE original vs corrected: {_fmt_test(d['intra_ttest'])}")
                out.append(f"{t.upper()} Inter-SE original vs corrected: {_fmt_test(d['inter_ttest'])}")
    return "\n".join(out) + "\n"


def render_svg(report: dict, records: Sequence[SubjectRecord], model: Optional[HarmonizationModel] = None,
               detrend_window: float = 5.0) -> str:
    """Box plots of age-detrended volumes per scanner, plus test-retest errors when present.

    Output is deterministic: fixed hash salt and no timestamp.
    """
    import io

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if model is not None:
        detrend = model.detrend
    else:
        volumes = {t: np.array([r.volume(t) for r in records], dtype=float) for t in ("gm", "wm", "wb")}
        detrend = fit_detrend_model(age_array(records), volumes, feature_matrix(records), window=detrend_window)
    corrected = correct_cohort(model, records) if model is not None else None
    ages = age_array(records)
    tr = report["test_retest"]
    has_tables = bool(report["tables"])
    n_rows = int(has_tables) + int(tr is not None)

    with plt.rc_context({"svg.hashsalt": "volharm", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(max(n_rows, 1), 3, figsize=(13, 4 * max(n_rows, 1)), squeeze=False)
        row = 0
        if has_tables:
            scanners = [s["scanner_id"] for s in report["tables"]["Original"]["wm"]["scanners"]]
            for k, t in enumerate(TISSUES):
                ax = axes[row, k]
                resid = detrend.volume_residual(t, ages, np.array([r.volume(t) for r in records], dtype=float))
                groups = [resid[[(r.scanner_id or evaluate.NOT_SPECIFIED) == s for r in records]] for s in scanners]
                pos = np.arange(len(scanners)) * 3.0
                ax.boxplot(groups, positions=pos, widths=0.9)
                if corrected is not None:
                    cv = np.array([c.corrected(t) for c in corrected], dtype=float)
                    cres = detrend.volume_residual(t, ages, cv)
                    cgroups = [cres[[(r.scanner_id or evaluate.NOT_SPECIFIED) == s for r in records]]
                               for s in scanners]
                    bp = ax.boxplot(cgroups, positions=pos + 1.0, widths=0.9, patch_artist=True)
                    for patch in bp["boxes"]:
                        patch.set_facecolor("#9ecae1")
                    ax.set_xticks(pos + 0.5)
                else:
                    ax.set_xticks(pos)
                ax.set_xticklabels(scanners, rotation=45, ha="right")
                ax.axhline(0.0, color="grey", lw=0.5)
                ax.set_title(f"{t.upper()} (white: original, blue: corrected)" if corrected else t.upper())
                ax.set_ylabel("age-detrended volume (mL)")
            row += 1
        if tr is not None:
            for k, t in enumerate(TISSUES):
                ax = axes[row, k]
                d = tr[t]
                data = [d["intra_se"], d["inter_se"]]
                labels = ["Intra-SE", "Inter-SE"]
                if d["intra_se_corrected"] is not None:
                    data = [d["intra_se"], d["intra_se_corrected"], d["inter_se"], d["inter_se_corrected"]]
                    labels = ["Intra-SE", "Intra-SE corr.", "Inter-SE", "Inter-SE corr."]
                ax.boxplot([np.ravel(x) for x in data])
                ax.set_xticks(np.arange(1, len(labels) + 1))
                ax.set_xticklabels(labels, rotation=30, ha="right")
                ax.set_title(f"{t.upper()} test-retest")
                ax.set_ylabel("absolute difference (mL)")
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()
