import json
import re
import subprocess
import sys

import numpy as np
import pytest

from stimswin.cli import apply_overrides, run
from stimswin.data import write_manifest, write_tensor_file

ERROR_LINE = re.compile(r"^error: (usage|config|data|numeric): \S.*$")


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated dataset plus a config pointing at it."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.json", epochs=1, k=2, batch_size=8,
                       data={"videos_per_class": 2, "manifest": str(root / "data" / "manifest.jsonl")},
                       viz={"max_clips": 1})
    assert run(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    return root, cfg


def single_error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and ERROR_LINE.match(err[0]), err
    return err[0]


def test_gen_data_idempotent(workspace):
    root, cfg = workspace
    before = {p.name: p.read_bytes() for p in (root / "data" / "videos").iterdir()}
    assert run(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    after = {p.name: p.read_bytes() for p in (root / "data" / "videos").iterdir()}
    assert before == after and len(before) == 8


def test_train_eval_viz(workspace, capsys):
    root, cfg = workspace
    out = root / "run"
    assert run(["train", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    progress = [l for l in capsys.readouterr().out.splitlines() if l.startswith("epoch")]
    assert len(progress) == 1 and "train_acc" in progress[0]
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["seed"] == 3 and resolved["verb"] == "train"
    assert len(json.loads((out / "history.json").read_text())) == 1
    assert (out / "checkpoint.ckpt").exists() and (out / "model_inference.ckpt").exists()

    assert run(["eval", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert 0.0 <= report["top1"] <= 1.0 and (out / "confusion.csv").exists()

    assert run(["viz", "--config", cfg, "--out", str(out)]) == 0
    (clip_dir,) = (out / "viz").iterdir()
    assert len(list(clip_dir.glob("frame_*.ppm"))) == 16 and (clip_dir / "overlay.json").exists()


def test_cv_with_override(workspace, capsys):
    root, cfg = workspace
    out = root / "cv"
    assert run(["cv", "--config", cfg, "--out", str(out), "--overrides", "mode=vst_l,embed_dim=8"]) == 0
    summary = json.loads((out / "cv_summary.json").read_text())
    assert "averaged_top1" in summary and len(summary["fold_accuracies"]) == 2
    assert (out / "fold1_confusion.csv").exists()
    assert "cosine" in capsys.readouterr().out


def test_out_dir_from_environment(workspace, monkeypatch, tmp_path):
    _, cfg = workspace
    monkeypatch.setenv("OUT_DIR", str(tmp_path / "envout"))
    assert run(["gen-data", "--config", cfg]) == 0
    assert (tmp_path / "envout" / "manifest.jsonl").exists()


@pytest.mark.parametrize("argv", [
    ["dance", "--config", "x.json"],
    ["train"],
    ["train", "--config", "x.json", "--jobs", "0"],
    ["train", "--config", "x.json", "--bogus"],
])
def test_usage_errors(argv, capsys):
    assert run(argv) == 1
    single_error_line(capsys)


def test_bad_override_syntax(workspace, capsys):
    _, cfg = workspace
    assert run(["train", "--config", cfg, "--overrides", "epochs"]) == 1
    single_error_line(capsys)


@pytest.mark.parametrize("cfg, overrides", [
    ({"epochs": 0}, ""),
    ({}, "epochz=3"),
    ({}, "data.nothing=1"),
    ({"colour": "red"}, ""),
    ({"data": {"manifest": None}}, ""),
])
def test_config_errors(tmp_path, capsys, cfg, overrides):
    path = write_config(tmp_path / "c.json", **cfg)
    assert run(["train", "--config", path, "--out", str(tmp_path), "--overrides", overrides]) == 2
    assert single_error_line(capsys).startswith("error: config")


def test_missing_config_file(tmp_path, capsys):
    assert run(["train", "--config", str(tmp_path / "nope.json")]) == 2
    single_error_line(capsys)


def test_data_error(tmp_path, capsys):
    write_manifest(tmp_path / "m.jsonl", [{"video_id": "a", "tensor_path": "a.vtf", "label_name": "rocking"}])
    write_tensor_file(tmp_path / "a.vtf", np.zeros((16, 36, 36, 3), np.uint8))
    cfg = write_config(tmp_path / "c.json", epochs=1, data={"manifest": str(tmp_path / "m.jsonl")})
    assert run(["train", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "rocking" in single_error_line(capsys)


def test_numeric_failure(tmp_path, capsys):
    write_tensor_file(tmp_path / "a.vtf", np.full((16, 36, 36, 3), np.nan, np.float32))
    write_manifest(tmp_path / "m.jsonl", [{"video_id": "a", "tensor_path": "a.vtf", "label_name": "spinning"}])
    cfg = write_config(tmp_path / "c.json", epochs=1, data={"manifest": str(tmp_path / "m.jsonl")})
    assert run(["train", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert single_error_line(capsys).startswith("error: numeric")


def test_apply_overrides_parses_json_values():
    cfg = {"a": 1, "b": {"c": "x"}, "d": [1]}
    out = apply_overrides(cfg, "a=2.5,b.c=hello,d=[3,4]")
    assert out == {"a": 2.5, "b": {"c": "hello"}, "d": [3, 4]} and cfg["a"] == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stimswin", "nope", "--config", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and ERROR_LINE.match(proc.stderr.strip())
