import hashlib
import json
import subprocess
import sys
import warnings

import pytest

from hybridvc import cli as cli_mod
from hybridvc.cli import main
from hybridvc.ensemble import read_scores
from hybridvc.features import load_dataset
from hybridvc.verify import CheckResult


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root):
    return {p.relative_to(root).as_posix(): sha(p) for p in sorted(root.rglob("*")) if p.is_file()}


SYNTH = ["--classes", "2", "--train-per-class", "30", "--test-per-class", "20", "--t-min", "6", "--t-max", "9",
         "--d-s", "6", "--d-m", "8", "--temporal", "--correlation", "--noise", "0.5", "--nuisance", "0.5",
         "--signal", "1.5", "--shared-dims", "2", "--unique-dims", "1", "--seed", "3", "--val-fraction", "0.25"]


def write_config(path, **doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), *SYNTH]) == 0
    common = dict(train_manifest="data/train.json", test_manifest="data/test.json", val_manifest="data/val.json")
    write_config(root / "lstm.json", hidden_sizes=[8], lr=0.1, epochs=10, seed=1, **common)
    write_config(root / "fusion.json", lr=0.1, epochs=40, abstract_width=12, fusion_width=12, lambda2=0.05, seed=1, **common)
    runs = root / "runs"
    assert main(["train", "lstm-spatial", "--config", str(root / "lstm.json"), "--out", str(runs)]) == 0
    assert main(["train", "fusion", "--config", str(root / "fusion.json"), "--out", str(runs)]) == 0
    return root


def test_synth_outputs_load_cleanly(pipeline):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        train = load_dataset(pipeline / "data" / "train.json")
        val = load_dataset(pipeline / "data" / "val.json")
    assert len(train) + len(val) == 60
    assert json.loads((pipeline / "data" / "synth_config.json").read_text())["seed"] == 3


def test_synth_deterministic(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), *SYNTH]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *SYNTH]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_synth_creates_nested_dir(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "x" / "y"), "--train-per-class", "2", "--test-per-class", "1"]) == 0
    assert (tmp_path / "x" / "y" / "train.json").exists()


def test_synth_invalid_spec_is_usage_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--classes", "3", "--segments", "2"]) == 1


def test_train_outputs(pipeline):
    runs = pipeline / "runs"
    for name in ("lstm-spatial.hslm", "lstm-spatial.log", "lstm-spatial.test.scores", "lstm-spatial.val.scores",
                 "fusion.hsfn", "fusion.log", "fusion.test.scores", "fusion.config.json"):
        assert (runs / name).exists(), name
    resolved = json.loads((runs / "fusion.config.json").read_text())
    assert resolved["lambda1"] == 3e-5 and resolved["momentum"] == 0.0
    assert "zero_rows=" in (runs / "fusion.log").read_text()


def test_train_fusion_logs_zero_rows_with_large_group_penalty(tmp_path, pipeline):
    cfg = json.loads((pipeline / "runs" / "fusion.config.json").read_text())
    cfg.update(lambda2=0.5, epochs=20)
    write_config(tmp_path / "c.json", **cfg)
    assert main(["train", "fusion", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 0
    last = (tmp_path / "fusion.log").read_text().splitlines()[-1]
    assert int(last.split("zero_rows=")[1]) > 0


def test_rerun_from_resolved_config_is_identical(tmp_path, pipeline):
    runs = pipeline / "runs"
    for model, ckpt in (("lstm-spatial", "lstm-spatial.hslm"), ("fusion", "fusion.hsfn")):
        out = tmp_path / model
        assert main(["train", model, "--config", str(runs / f"{model}.config.json"), "--out", str(out)]) == 0
        assert sha(out / ckpt) == sha(runs / ckpt)
        assert sha(out / f"{model}.test.scores") == sha(runs / f"{model}.test.scores")


def test_train_unknown_key_and_missing_config(tmp_path, pipeline):
    bad = write_config(tmp_path / "bad.json", train_manifest=str(pipeline / "data/train.json"),
                       test_manifest=str(pipeline / "data/test.json"), learning_rate=0.1)
    assert main(["train", "fusion", "--config", str(bad)]) == 2
    assert main(["train", "fusion", "--config", str(tmp_path / "nope.json")]) == 2


def test_train_bad_data_surfaces_before_training(tmp_path, pipeline):
    cfg = write_config(tmp_path / "c.json", train_manifest=str(tmp_path / "missing.json"), test_manifest=str(pipeline / "data/test.json"))
    assert main(["train", "lstm-motion", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_fuse_average_weights_and_cv(tmp_path, pipeline):
    runs = pipeline / "runs"
    tables = [str(runs / "lstm-spatial.test.scores"), str(runs / "fusion.test.scores")]
    assert main(["fuse", tables[0], "--out", str(tmp_path / "one"), "--weights", "1"]) == 0
    assert read_scores(tmp_path / "one").scores.tolist() == read_scores(tables[0]).scores.tolist()

    assert main(["fuse", *tables, "--out", str(tmp_path / "avg")]) == 0
    assert main(["fuse", *tables, "--out", str(tmp_path / "uni"), "--weights", "0.5,0.5"]) == 0
    assert read_scores(tmp_path / "avg").scores.tobytes() == read_scores(tmp_path / "uni").scores.tobytes()

    val = [str(runs / "lstm-spatial.val.scores"), str(runs / "fusion.val.scores")]
    args = ["fuse", *tables, "--out", str(tmp_path / "cv"), "--cv", "--val-manifest", str(pipeline / "data/val.json")]
    for v in val:
        args += ["--val-tables", v]
    assert main(args) == 0
    record = json.loads((tmp_path / "cv.weights.json").read_text())
    assert record["method"] == "cv" and sum(record["weights"]) == pytest.approx(1.0)


def test_fuse_misaligned_and_usage(tmp_path, pipeline):
    runs = pipeline / "runs"
    assert main(["fuse", str(runs / "fusion.test.scores"), str(runs / "fusion.val.scores"), "--out", str(tmp_path / "x")]) == 2
    assert main(["fuse", str(runs / "fusion.test.scores"), "--out", str(tmp_path / "x"), "--weights", "1", "--cv"]) == 1


def test_eval_writes_reports(tmp_path, pipeline, capsys):
    prefix = str(tmp_path / "rep")
    assert main(["eval", str(pipeline / "runs/lstm-spatial.test.scores"), "--manifest", str(pipeline / "data/test.json"), "--out", prefix]) == 0
    out = capsys.readouterr().out
    assert "accuracy:" in out and "mAP:" in out
    report = json.loads((tmp_path / "rep.json").read_text())
    assert 0 <= report["accuracy"] <= 1 and len(report["per_class_ap"]) == 2


def test_verify_metrics_passes(capsys):
    assert main(["verify", "metrics"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] AP worked example" in out and "[FAIL]" not in out


def test_verify_failure_exit_code(monkeypatch):
    monkeypatch.setitem(cli_mod.verify.SUITES, "metrics", lambda seed: [CheckResult("forced", False, "x")])
    assert main(["verify", "metrics"]) == 3


def test_console_entry_point_usage_error():
    proc = subprocess.run([sys.executable, "-m", "hybridvc", "train", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "Usage" in proc.stderr
