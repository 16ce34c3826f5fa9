"""Command-line interface.

Subcommands: ``features``, ``split``, ``train``, ``correct``, ``evaluate``
and ``synth``. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure. ``VOLHARM_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import csvio, harmonize, report, synth
from .descriptors import DEFAULT_CNR_PAIRS
from .errors import DataError, InvalidSpec, NumericalError

log = logging.getLogger("volharm")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing(path: Optional[str], what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {path!r} does not exist")
    return p


def _output(path: Optional[str], what: str = "--output") -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"directory of {what} {path!r} does not exist")
    return p


def _out_dir(path: Optional[str]) -> Path:
    if path is None:
        raise UsageError("--output is required")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _need_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"'{args.command}' is stochastic and needs --seed")
    return args.seed


def _parse_pairs(text: Optional[str]):
    if text is None:
        return DEFAULT_CNR_PAIRS
    pairs = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 2 or not all(parts):
            raise UsageError(f"bad CNR pair {item!r}; expected LABEL:LABEL")
        pairs.append(tuple(parts))
    if len(pairs) != 6:
        raise UsageError(f"--cnr-pairs needs exactly 6 pairs, got {len(pairs)}")
    return tuple(pairs)


def _parse_gammas(text: Optional[str]):
    if text is None:
        return None
    try:
        gammas = [float(g) for g in text.split(",")]
    except ValueError:
        raise UsageError(f"--rbf-gamma-grid must be comma-separated numbers, got {text!r}") from None
    if not gammas or any(not g > 0 for g in gammas):
        raise UsageError("--rbf-gamma-grid values must be positive")
    return gammas


def cmd_features(args) -> int:
    src = _existing(args.input, "--input")
    dst = _output(args.output)
    pairs = _parse_pairs(args.cnr_pairs)
    _, rows = csvio.read_stats(src, pairs)
    records, errors = [], []
    for line, row in rows:
        try:
            records.append(csvio.record_from_stats(row, pairs))
        except ValueError as exc:
            errors.append(f"line {line} ({row.get('scan_id') or '?'}): {type(exc).__name__}: {exc}")
    if errors:
        for e in errors:
            print(e, file=sys.stderr)
        raise csvio.RowErrors(f"{len(errors)} of {len(rows)} row(s) failed; no output written", errors)
    csvio.write_cohort(dst, records)
    log.info("wrote %d feature rows to %s", len(records), dst)
    return 0


def cmd_split(args) -> int:
    src = _existing(args.input, "--input")
    seed = _need_seed(args)
    if args.split_fraction is None:
        raise UsageError("split needs --split-fraction")
    out = _out_dir(args.output)
    records = csvio.read_cohort(src)
    train, test = harmonize.split_cohort(records, args.split_fraction, seed)
    csvio.write_cohort(out / "train.csv", train)
    csvio.write_cohort(out / "test.csv", test)
    log.info("split %d records into %d train / %d test", len(records), len(train), len(test))
    return 0


def _fit_config(args) -> harmonize.FitConfig:
    return harmonize.FitConfig(
        detrend_window=args.detrend_window_years,
        wb_mode="direct_model" if args.wb_mode == "direct" else "sum_of_corrected",
        rbf_gammas=_parse_gammas(args.rbf_gamma_grid),
    )


def cmd_train(args) -> int:
    src = _existing(args.input, "--input")
    dst = _output(args.output)
    cfg = _fit_config(args)
    records = csvio.read_cohort(src)
    split_seed = split_fraction = None
    if args.split_fraction is not None:
        split_seed, split_fraction = _need_seed(args), args.split_fraction
        records, _ = harmonize.split_cohort(records, split_fraction, split_seed)
    # non-convergence is reported as a warning and recorded in the model's training metadata
    model = harmonize.fit(records, args.kernel, cfg, split_seed, split_fraction)
    harmonize.save_model(model, dst)
    for tissue in ("gm", "wm", "wb"):
        m = model.tissue_model(tissue)
        if m is not None:
            log.info("%s: %d relevance vectors", tissue, m.n_relevance)
    return 0


def cmd_correct(args) -> int:
    model_path = _existing(args.model, "--model")
    src = _existing(args.input, "--input")
    dst = _output(args.output)
    model = harmonize.load_model(model_path)
    records = csvio.read_cohort(src)
    csvio.write_corrected(dst, harmonize.correct_cohort(model, records))
    return 0


def cmd_evaluate(args) -> int:
    src = _existing(args.input, "--input")
    model = harmonize.load_model(_existing(args.model, "--model")) if args.model else None
    out = _out_dir(args.output)
    formats = args.report_format or ["json", "text"]
    records = csvio.read_cohort(src)
    rep = report.build_report(records, model, min_n=args.min_scanner_n, detrend_window=args.detrend_window_years)
    if "json" in formats:
        (out / "report.json").write_text(report.to_json(rep), encoding="utf-8")
    if "text" in formats:
        (out / "report.txt").write_text(report.render_text(rep), encoding="utf-8")
    if "svg" in formats:
        svg = report.render_svg(rep, records, model, detrend_window=args.detrend_window_years)
        (out / "boxplots.svg").write_text(svg, encoding="utf-8")
    return 0


def _load_spec(path: Path, seed: int):
    """A cohort spec JSON, or ``{"preset": "descriptor_bias", ...}`` for the benchmark preset.

    An optional ``"test_retest": {"n_patients": 9, "scanners": [...]}`` entry
    asks for a test-retest design from the same sites as well.
    """
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise InvalidSpec(f"{path}: top level must be an object")
    retest = d.pop("test_retest", None)
    if "preset" in d:
        preset = d.pop("preset")
        if preset != "descriptor_bias":
            raise InvalidSpec(f"unknown preset {preset!r}")
        d.pop("seed", None)
        try:
            spec = synth.descriptor_bias_spec(seed=seed, **d)
        except TypeError as exc:
            raise InvalidSpec(f"bad preset parameters: {exc}") from None
    else:
        d["seed"] = seed
        spec = synth.CohortSpec.from_dict(d)
    if retest is not None and not isinstance(retest, dict):
        raise InvalidSpec("test_retest must be an object")
    return spec, retest


def cmd_synth(args) -> int:
    src = _existing(args.input, "--input")
    seed = _need_seed(args)
    out = _out_dir(args.output)
    spec, retest = _load_spec(src, seed)
    cohort = synth.generate_cohort(spec)
    csvio.write_cohort(out / "cohort.csv", cohort.records)
    csvio.write_truth(out / "ground_truth.csv", cohort.truth_rows())
    if retest is not None:
        unknown = set(retest) - {"n_patients", "scanners"}
        if unknown:
            raise InvalidSpec(f"unknown test_retest fields {sorted(unknown)}")
        tr = synth.generate_test_retest(spec, retest.get("n_patients", 9), retest.get("scanners"))
        csvio.write_cohort(out / "test_retest.csv", tr.records)
        csvio.write_truth(out / "test_retest_ground_truth.csv", tr.truth_rows())
    return 0


COMMANDS = {
    "features": (cmd_features, "compute the 16 descriptors from per-scan image statistics"),
    "split": (cmd_split, "random subject-level train/test split"),
    "train": (cmd_train, "fit a harmonization model on a reference cohort"),
    "correct": (cmd_correct, "apply a harmonization model to a cohort"),
    "evaluate": (cmd_evaluate, "scanner-wise, correlation and test-retest reports"),
    "synth": (cmd_synth, "generate a synthetic multi-site cohort with ground truth"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volharm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--input", help="input CSV (synth: spec JSON)")
        p.add_argument("--output", help="output file or directory")
        if name in ("correct", "evaluate"):
            p.add_argument("--model", help="model JSON written by 'train'")
        if name in ("split", "train", "synth"):
            p.add_argument("--seed", type=int)
        if name in ("split", "train"):
            p.add_argument("--split-fraction", type=float)
        if name == "train":
            p.add_argument("--kernel", choices=("linear", "rbf"), default="linear")
            p.add_argument("--rbf-gamma-grid", help="comma-separated rbf length scales to search")
            p.add_argument("--wb-mode", choices=("sum", "direct"), default="sum")
        if name in ("train", "evaluate"):
            p.add_argument("--detrend-window-years", type=float, default=5.0)
        if name == "evaluate":
            p.add_argument("--min-scanner-n", type=int, default=10)
            p.add_argument("--report-format", choices=("json", "text", "svg"), action="append",
                           help="repeatable; default json and text")
        if name == "features":
            p.add_argument("--cnr-pairs", help="six LABEL:LABEL pairs, comma-separated")
    return parser


def _configure_logging():
    level_name = os.environ.get("VOLHARM_LOG", "WARNING").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    func = COMMANDS[args.command][0]
    try:
        return func(args)
    except UsageError as exc:
        print(f"volharm {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"volharm {args.command}: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError, OSError) as exc:
        print(f"volharm {args.command}: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
