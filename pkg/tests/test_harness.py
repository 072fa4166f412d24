import csv
import json
import shutil
import time

import numpy as np
import pytest

from bnnrisk import harness
from bnnrisk.cli import main

TINY = harness.bundled_data("tiny")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    config = harness.load_config("tiny")
    start = time.perf_counter()
    model = harness.train_models(config, TINY, out / "model.json")
    preds = harness.predict_file(model, TINY, out / "predictions.csv")
    report = harness.verify_bounds_file([preds], out / "bounds")
    elapsed = time.perf_counter() - start
    return out, model, preds, report, elapsed


def test_tiny_train_predict_verify_under_a_minute(tiny_run):
    out, model, preds, report, elapsed = tiny_run
    assert elapsed < 60
    assert report.ok and report.n_records > 0
    assert (out / "history.csv").exists()
    assert json.loads((out / "bounds" / "bounds_report.json").read_text())["n_violations"] == 0


def test_prediction_file_contract(tiny_run):
    _, model, preds, _, _ = tiny_run
    with open(preds, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == harness.PREDICTION_COLUMNS
    assert {r["split"] for r in rows} == {"test", "ood"}
    assert len({r["config_digest"] for r in rows}) == 1
    for r in rows[:50]:
        m, v = float(r["mean"]), float(r["variance"])
        assert 0 <= m <= 1 and 0 <= v <= m * (1 - m) + 1e-12
        assert float(r["std"]) == pytest.approx(v**0.5)


def test_model_file_round_trip(tiny_run):
    _, model_path, _, _, _ = tiny_run
    doc = json.loads(model_path.read_text())
    assert doc["format"] == harness.MODEL_FORMAT and doc["format_version"] == harness.FORMAT_VERSION
    assert doc["masked_features"] == ["age", "weight"]
    loaded = harness.load_model(model_path)
    assert loaded.config.digest() == doc["config_digest"]
    assert loaded.bnn.spec.hidden_sizes == (32, 32)


def test_model_version_mismatch_refused(tiny_run, tmp_path):
    _, model_path, _, _, _ = tiny_run
    doc = json.loads(model_path.read_text())
    doc["format_version"] = harness.FORMAT_VERSION + 1
    bad = tmp_path / "model.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        harness.load_model(bad)
    doc["format"] = "something-else"
    bad.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="not a"):
        harness.load_model(bad)


def test_prediction_is_reproducible(tiny_run, tmp_path):
    _, model, preds, _, _ = tiny_run
    again = harness.predict_file(model, TINY, tmp_path / "p.csv")
    assert again.read_bytes() == preds.read_bytes()


def test_reports(tiny_run, tmp_path):
    _, _, preds, _, _ = tiny_run
    ev = harness.evaluate([preds], tmp_path / "ev")
    for name in ("risk_coverage_bnn.csv", "risk_coverage_gbdt.csv", "auroc_coverage.csv", "scatter.csv", "evaluation.json"):
        assert (tmp_path / "ev" / name).exists()
    assert set(ev["auroc"]) == {"bnn", "deterministic", "gbdt"}
    rc = list(csv.DictReader(open(tmp_path / "ev" / "risk_coverage_bnn.csv")))
    assert float(rc[-1]["coverage"]) == 1.0
    assert float(rc[-1]["cumulative_loss"]) == pytest.approx(ev["risk_coverage"]["bnn_total_loss"], abs=1e-12)
    ood = harness.ood_report([preds], tmp_path / "ood")
    assert ood["uncertainty_shift"]["n_ood"] > 0
    assert set(ood["ood_detection"]["methods"]) == {"bnn_std", "nn_sigmoid"}


def test_mixed_digests_refused(tiny_run, tmp_path):
    _, _, preds, _, _ = tiny_run
    text = preds.read_text()
    digest = text.splitlines()[1].rsplit(",", 1)[1]
    other = tmp_path / "other.csv"
    other.write_text(text.replace(digest, "0" * 16))
    with pytest.raises(harness.StageError, match="mix"):
        harness.evaluate([preds, other], tmp_path / "ev")


def test_single_class_evaluation_is_an_error(tiny_run, tmp_path):
    _, _, preds, _, _ = tiny_run
    lines = preds.read_text().splitlines()
    header, rows = lines[0], [l for l in lines[1:] if ",test,0," in l]
    one = tmp_path / "neg.csv"
    one.write_text("\n".join([header, *rows]) + "\n")
    with pytest.raises(harness.StageError, match="both classes") as info:
        harness.evaluate([one], tmp_path / "ev")
    assert info.value.stage == "evaluate"


def test_generate_data_is_deterministic(tmp_path):
    config = harness.load_config("tiny")
    a = harness.generate_data(config, tmp_path / "a")
    b = harness.generate_data(config, tmp_path / "b")
    for name in ("train.csv", "test.csv", "ood.csv", "meta.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
        assert (a / name).read_bytes() == (TINY / name).read_bytes()


def test_config_overrides_and_digest():
    base = harness.load_config("tiny")
    assert base.digest() == harness.load_config("tiny").digest()
    changed = harness.load_config("tiny", {"train.epochs": 6})
    assert changed.train.epochs == 6 and changed.digest() != base.digest()
    assert harness.ExperimentConfig.from_dict(base.to_dict()).digest() == base.digest()
    with pytest.raises(ValueError):
        harness.load_config("tiny", {"train.epoch": 6})
    with pytest.raises(FileNotFoundError):
        harness.bundled_config("nope")


def test_missing_input_file_names_stage(tmp_path):
    with pytest.raises(harness.StageError) as info:
        harness.train_models(harness.load_config("tiny"), tmp_path, tmp_path / "m.json")
    assert info.value.stage == "train"
    assert "train.csv" in str(info.value)


def test_run_experiment_writes_summary(tmp_path):
    config = harness.load_config("tiny", {"train.epochs": 2, "deterministic.epochs": 2, "T": 5})
    summary = harness.run_experiment(config, tmp_path / "exp", data_dir=TINY)
    assert summary["bounds_violations"] == 0
    assert not (tmp_path / "exp" / "INCOMPLETE").exists()
    assert json.loads((tmp_path / "exp" / "summary.json").read_text())["config_digest"] == config.digest()


def test_failed_run_leaves_marker(tmp_path):
    data = tmp_path / "data"
    shutil.copytree(TINY, data)
    (data / "test.csv").write_text("record_id,age,label\n1,2,0\n")
    with pytest.raises(harness.StageError):
        harness.run_experiment(harness.load_config("tiny", {"train.epochs": 1, "deterministic.epochs": 1}), tmp_path / "exp", data_dir=data)
    assert "failed at stage" in (tmp_path / "exp" / "INCOMPLETE").read_text()


class TestCli:
    def test_chained_subcommands(self, tmp_path, capsys):
        d, m, p = tmp_path / "data", tmp_path / "model.json", tmp_path / "pred.csv"
        assert main(["generate-data", "--config", "tiny", "--n-train", "300", "--out", str(d)]) == 0
        assert main(["train", "--config", "tiny", "--epochs", "2", "--data", str(d), "--out", str(m)]) == 0
        assert main(["predict", "--model", str(m), "--data", str(d), "--out", str(p), "-T", "5"]) == 0
        assert main(["verify-bounds", "--predictions", str(p), "--out", str(tmp_path / "b")]) == 0
        assert main(["evaluate", "--predictions", str(p), "--out", str(tmp_path / "e")]) == 0
        assert main(["ood-report", "--predictions", str(p), "--out", str(tmp_path / "o")]) == 0
        out = capsys.readouterr().out
        assert "0 bound violations" in out and "ratio" in out
        assert len(list(csv.reader(open(d / "train.csv")))) == 301

    def test_errors_exit_nonzero(self, tmp_path, capsys):
        assert main(["predict", "--model", str(tmp_path / "none.json"), "--data", str(TINY), "--out", str(tmp_path / "p")]) == 2
        bad = tmp_path / "bad.csv"
        bad.write_text("record_id,split\n1,test\n")
        assert main(["evaluate", "--predictions", str(bad), "--out", str(tmp_path / "e")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_violations_exit_one(self, tmp_path):
        cols = ",".join(harness.PREDICTION_COLUMNS)
        bad = tmp_path / "p.csv"
        bad.write_text(f"{cols}\n1,test,1,0.99,0.2,0.447,0.5,0.5,abc\n")
        assert main(["verify-bounds", "--predictions", str(bad), "--out", str(tmp_path / "b")]) == 1

    def test_help(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for cmd in ("generate-data", "train", "predict", "evaluate", "ood-report", "verify-bounds"):
            assert cmd in text
