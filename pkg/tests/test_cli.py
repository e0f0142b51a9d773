import json
import os
import pathlib

import numpy as np
import pytest

from kpshield import cli, harness, nnet
from kpshield.tensorio import save_tensor

GOLDEN = pathlib.Path(__file__).parent / "golden"
COMMANDS = ["synth", "train-model", "attack", "kp", "fit-detector", "detect", "eval", "export-plots", "experiment"]


def _help_text(command, monkeypatch, capsys):
    monkeypatch.setenv("COLUMNS", "100")
    argv = [command, "--help"] if command else ["--help"]
    assert cli.main(argv) == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("command", [""] + COMMANDS)
def test_help_golden(command, monkeypatch, capsys):
    text = _help_text(command, monkeypatch, capsys)
    path = GOLDEN / f"help_{command or 'main'}.txt"
    if os.environ.get("KPSHIELD_UPDATE_GOLDEN"):
        path.write_text(text)
    assert text == path.read_text()


def test_help_lists_defaults(monkeypatch, capsys):
    text = _help_text("fit-detector", monkeypatch, capsys)
    assert "--estimators ESTIMATORS" in text and "(default: 200)" in text
    assert "(default: 2)" in text


def test_fit_detector_default_estimators():
    args = cli.build_parser().parse_args(["fit-detector", "--kp-csv", "a.csv", "--out", "d.kpd"])
    assert args.estimators == 200 and args.depth == 2


def test_usage_errors_exit_one(capsys):
    assert cli.main(["attack", "--model", "m.kpm"]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "--help" in err
    assert cli.main(["synth", "--dims", "3,4", "--out", "x"]) == 1
    assert cli.main(["kp", "--model", "missing.kpm", "--images", "x", "--out-csv", "y"]) == 1


def test_bad_log_level(monkeypatch, tmp_path):
    monkeypatch.setenv("KP_SHIELD_LOG", "loud")
    assert cli.main(["synth", "--dims", "16,16,1", "--per-class", "1", "--out", str(tmp_path / "d")]) == 1


def test_data_error_reports_path_and_offset(tmp_path, capsys):
    bad = tmp_path / "bad.kpm"
    bad.write_bytes(b"NOPE" + bytes(20))
    img = tmp_path / "img.kpt"
    save_tensor(np.zeros((16, 16, 1)), img)
    assert cli.main(["kp", "--model", str(bad), "--images", str(img), "--out-csv", str(tmp_path / "o.csv")]) == 2
    err = capsys.readouterr().err
    assert "BadMagic" in err and str(bad) in err and "byte 0" in err


def test_kp_single_image_two_line_csv(tmp_path):
    model = nnet.mlp((16, 16, 1), 3, hidden=4, seed=1)
    nnet.save_model(model, tmp_path / "m.kpm")
    save_tensor(np.random.default_rng(0).random((1, 16, 16, 1)), tmp_path / "one.kpt")
    out = tmp_path / "one.csv"
    assert cli.main(["kp", "--model", str(tmp_path / "m.kpm"), "--images", str(tmp_path / "one.kpt"),
                     "--source", "cw", "--out-csv", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("0,cw,mlp,")


def _pipeline(root):
    root.mkdir()
    d = str(root)
    steps = [
        ["synth", "--seed", "3", "--classes", "3", "--per-class", "12", "--dims", "16,16,1", "--out", f"{d}/data"],
        ["train-model", "--data", f"{d}/data", "--arch", "mlp", "--epochs", "8", "--seed", "1", "--out", f"{d}/m.kpm"],
        ["attack", "--model", f"{d}/m.kpm", "--data", f"{d}/data", "--attack", "deepfool", "--count", "6",
         "--out", f"{d}/df.kpt", "--index-out", f"{d}/df_idx.csv"],
        ["attack", "--model", f"{d}/m.kpm", "--data", f"{d}/data", "--attack", "jsma", "--count", "6",
         "--params", '{"gamma": 0.2}', "--parallelism", "2", "--out", f"{d}/js.kpt"],
        ["kp", "--model", f"{d}/m.kpm", "--images", f"{d}/data", "--out-csv", f"{d}/benign.csv"],
        ["kp", "--model", f"{d}/m.kpm", "--images", f"{d}/df.kpt", "--source", "deepfool", "--out-csv", f"{d}/df.csv"],
        ["kp", "--model", f"{d}/m.kpm", "--images", f"{d}/js.kpt", "--source", "jsma", "--parallelism", "2",
         "--out-csv", f"{d}/js.csv"],
        ["fit-detector", "--kp-csv", f"{d}/benign.csv", f"{d}/df.csv", "--estimators", "20", "--out", f"{d}/det.kpd"],
        ["detect", "--detector", f"{d}/det.kpd", "--kp-csv", f"{d}/df.csv", "--out-csv", f"{d}/labels.csv"],
        ["eval", "--mode", "cross", "--runs", f"{d}/benign.csv", f"{d}/df.csv", f"{d}/js.csv",
         "--benign-count", "10", "--estimators", "20", "--out-json", f"{d}/cross.json"],
        ["eval", "--mode", "intra", "--runs", f"{d}/benign.csv", f"{d}/df.csv", f"{d}/js.csv",
         "--benign-count", "10", "--estimators", "20", "--out-json", f"{d}/intra.json"],
        ["export-plots", "--kp-csv", f"{d}/benign.csv", f"{d}/df.csv", "--out-dir", f"{d}/plots"],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return sorted(p for p in root.rglob("*") if p.is_file())


def test_pipeline_smoke_and_rerun_identical(tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    assert [p.relative_to(tmp_path / "a") for p in first] == [p.relative_to(tmp_path / "b") for p in second]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes(), a.name
    report = json.loads((tmp_path / "a" / "cross.json").read_text())
    assert report["pairs"][0]["pair"] == "deepfool/mlp" and len(report["matrix"]) == 2
    intra = json.loads((tmp_path / "a" / "intra.json").read_text())
    assert len(intra["intra"]) == 2
    rows = harness.read_kp_csv(tmp_path / "a" / "df.csv")
    assert len(rows) == 6 and all(r.source == "deepfool" for r in rows)
