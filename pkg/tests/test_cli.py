import csv
import json

import numpy as np
import pytest

from volharm import cli, harmonize
from volharm.csvio import AFFINE_COLUMNS, COHORT_COLUMNS, read_cohort
from volharm.descriptors import DEFAULT_CNR_PAIRS
from volharm.errors import NoConvergence

LABELS = sorted({lab for pair in DEFAULT_CNR_PAIRS for lab in pair})
SPEC = {"preset": "descriptor_bias", "n_subjects": 300, "test_retest": {"n_patients": 9,
                                                                         "scanners": ["site-1", "site-3", "site-5"]}}


def stats_rows(affines):
    rows = []
    for i, a in enumerate(affines):
        row = {"subject_id": f"s{i}", "scan_id": f"s{i}_1", "nmi": 1.1, "scanner_id": "A", "age": 40 + i}
        row.update(zip(AFFINE_COLUMNS, np.asarray(a, dtype=float)[:3].ravel()))
        for k, lab in enumerate(LABELS):
            row[f"mean_{lab}"] = 100.0 + 20 * k
            row[f"var_{lab}"] = 25.0 + k
        rows.append(row)
    return rows


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    (d / "spec.json").write_text(json.dumps(SPEC))
    assert run("synth", "--input", d / "spec.json", "--output", d / "synth", "--seed", 3) == 0
    assert run("split", "--input", d / "synth/cohort.csv", "--output", d / "split",
               "--split-fraction", 0.7, "--seed", 1) == 0
    assert run("train", "--input", d / "split/train.csv", "--output", d / "model.json") == 0
    assert run("correct", "--model", d / "model.json", "--input", d / "split/test.csv",
               "--output", d / "corrected.csv") == 0
    assert run("evaluate", "--model", d / "model.json", "--input", d / "split/test.csv",
               "--output", d / "report", "--min-scanner-n", 5) == 0
    assert run("evaluate", "--model", d / "model.json", "--input", d / "synth/test_retest.csv",
               "--output", d / "retest", "--report-format", "json") == 0
    return d


# --- features ---

def test_features_identity_affine(tmp_path):
    src = write_rows(tmp_path / "stats.csv", stats_rows([np.eye(4)] * 3))
    assert run("features", "--input", src, "--output", tmp_path / "f.csv") == 0
    records = read_cohort(tmp_path / "f.csv")
    assert len(records) == 3
    for r in records:
        x = r.features.as_array()
        np.testing.assert_allclose(x[0:3], 0.0, atol=1e-12)
        np.testing.assert_allclose(x[3:6], 1.0, atol=1e-12)
        np.testing.assert_allclose(x[6:9], 0.0, atol=1e-12)
        assert r.features.nmi == 1.1
    with open(tmp_path / "f.csv") as fh:
        assert tuple(next(csv.reader(fh))) == COHORT_COLUMNS


def test_features_reflection_is_row_error(tmp_path, capsys):
    mirror = np.diag([-1.0, 1.0, 1.0, 1.0])
    src = write_rows(tmp_path / "stats.csv", stats_rows([np.eye(4), mirror, np.eye(4)]))
    assert run("features", "--input", src, "--output", tmp_path / "f.csv") == 2
    err = capsys.readouterr().err
    assert "line 3 (s1_1)" in err and "ReflectionNotSupported" in err
    assert not (tmp_path / "f.csv").exists()


def test_features_custom_pairs_need_six(tmp_path):
    src = write_rows(tmp_path / "stats.csv", stats_rows([np.eye(4)]))
    assert run("features", "--input", src, "--output", tmp_path / "f.csv", "--cnr-pairs", "GM:WM") == 1


# --- split / exit codes ---

def test_split_seven_three(tmp_path):
    src = write_rows(tmp_path / "stats.csv", stats_rows([np.eye(4)] * 10))
    run("features", "--input", src, "--output", tmp_path / "c.csv")
    assert run("split", "--input", tmp_path / "c.csv", "--output", tmp_path / "out",
               "--split-fraction", 0.7, "--seed", 0) == 0
    assert len(read_cohort(tmp_path / "out/train.csv")) == 7
    assert len(read_cohort(tmp_path / "out/test.csv")) == 3


@pytest.mark.parametrize("argv", [
    ("split", "--input", "{d}/c.csv", "--output", "{d}/o", "--split-fraction", "0.7"),
    ("synth", "--input", "{d}/spec.json", "--output", "{d}/o"),
    ("train", "--input", "{d}/c.csv", "--output", "{d}/m.json", "--split-fraction", "0.7"),
])
def test_missing_seed_is_usage_error(tmp_path, argv):
    (tmp_path / "c.csv").write_text(",".join(COHORT_COLUMNS) + "\n")
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    assert run(*[a.format(d=tmp_path) for a in argv]) == 1


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("train", "--kernel", "poly")
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        run("nonsense")
    assert info.value.code == 1
    assert run("train", "--input", tmp_path / "missing.csv", "--output", tmp_path / "m.json") == 1


def test_data_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,scan_id\na,b\n")
    assert run("train", "--input", bad, "--output", tmp_path / "m.json") == 2
    (tmp_path / "spec.json").write_text('{"n_subjects": 0, "sites": [{"scanner_id": "A"}]}')
    assert run("synth", "--input", tmp_path / "spec.json", "--output", tmp_path / "o", "--seed", 1) == 2
    (tmp_path / "junk.json").write_text("{}")
    assert run("correct", "--model", tmp_path / "junk.json", "--input", bad, "--output", tmp_path / "x.csv") == 2


def test_numerical_failure_exit_code(pipeline, monkeypatch, tmp_path):
    def failing_fit(*args, **kwargs):
        raise NoConvergence("did not converge in 1000 iterations")

    monkeypatch.setattr(harmonize, "fit", failing_fit)
    assert run("train", "--input", pipeline / "split/train.csv", "--output", tmp_path / "m.json") == 3


# --- pipeline ---

def test_pipeline_outputs(pipeline):
    corrected = list(csv.DictReader(open(pipeline / "corrected.csv")))
    assert len(corrected) == len(read_cohort(pipeline / "split/test.csv"))
    assert {"gm_corr_ml", "wb_corr_ml", "gm_var"} <= set(corrected[0])
    rep = json.loads((pipeline / "report/report.json").read_text())
    orig = rep["tables"]["Original"]["gm"]["pooled"]["std"]
    lin = rep["tables"]["Linear"]["gm"]["pooled"]["std"]
    assert lin < orig
    assert "Original" in (pipeline / "report/report.txt").read_text()
    retest = json.loads((pipeline / "retest/report.json").read_text())
    tr = retest["test_retest"]["gm"]
    assert len(tr["inter_se"]) == 9 and tr["inter_ttest"]["df"] == 26
    assert not (pipeline / "retest/report.txt").exists()


def test_commands_are_byte_identical(pipeline, tmp_path):
    d = pipeline
    run("synth", "--input", d / "spec.json", "--output", tmp_path / "synth", "--seed", 3)
    run("split", "--input", d / "synth/cohort.csv", "--output", tmp_path / "split", "--split-fraction", 0.7, "--seed", 1)
    run("train", "--input", d / "split/train.csv", "--output", tmp_path / "model.json")
    run("correct", "--model", d / "model.json", "--input", d / "split/test.csv", "--output", tmp_path / "c.csv")
    run("evaluate", "--model", d / "model.json", "--input", d / "split/test.csv", "--output", tmp_path / "rep",
        "--min-scanner-n", 5, "--report-format", "json", "--report-format", "text", "--report-format", "svg")
    run("evaluate", "--model", d / "model.json", "--input", d / "split/test.csv", "--output", tmp_path / "rep2",
        "--min-scanner-n", 5, "--report-format", "svg")
    pairs = [
        ("synth/cohort.csv", "synth/cohort.csv"),
        ("synth/ground_truth.csv", "synth/ground_truth.csv"),
        ("synth/test_retest.csv", "synth/test_retest.csv"),
        ("split/train.csv", "split/train.csv"),
        ("split/test.csv", "split/test.csv"),
        ("model.json", "model.json"),
        ("corrected.csv", "c.csv"),
        ("report/report.json", "rep/report.json"),
        ("report/report.txt", "rep/report.txt"),
    ]
    for a, b in pairs:
        assert (d / a).read_bytes() == (tmp_path / b).read_bytes(), a
    assert (tmp_path / "rep/boxplots.svg").read_bytes() == (tmp_path / "rep2/boxplots.svg").read_bytes()


def test_inputs_not_mutated(pipeline, tmp_path):
    before = (pipeline / "split/test.csv").read_bytes()
    run("correct", "--model", pipeline / "model.json", "--input", pipeline / "split/test.csv",
        "--output", tmp_path / "c.csv")
    assert (pipeline / "split/test.csv").read_bytes() == before
