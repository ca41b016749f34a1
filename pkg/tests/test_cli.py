import json
import subprocess
import sys

import pytest

from seamcap.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["--seed", "3", "--out", str(data), "simulate", "--subjects", "2",
                 "--minutes", "4", "--sessions", "4", "--finetune-sessions", "3"]) == EXIT_OK
    ui = root / "ui"
    assert main(["--out", str(ui), "train", "--data", str(data), "--hidden", "8",
                 "--epochs", "1", "--hop", "32"]) == EXIT_OK
    return root, data, ui


def test_simulate_writes_manifest(workspace):
    _, data, _ = workspace
    m = json.loads((data / "manifest.json").read_text())
    assert len(m["sessions"]) == 8 and m["seed"] == 3


def test_train_adaptive_and_eval(workspace, capsys):
    root, data, ui = workspace
    ua = root / "ua"
    assert main(["--out", str(ua), "train", "--data", str(data), "--stage", "adaptive",
                 "--init", str(ui), "--epochs", "1", "--hop", "32"]) == EXIT_OK
    assert (ua / "weights.bin").exists() and (ua / "metrics.csv").exists()
    assert main(["--out", str(root / "rep"), "eval", "--data", str(data), "--model", str(ua)]) == EXIT_OK
    rep = json.loads((root / "rep" / "report.json").read_text())
    assert set(rep["per_joint"]) >= {"wristL", "nose"}
    assert main(["--out", str(root / "base"), "eval", "--data", str(data)]) == EXIT_OK
    assert "MPJPE" in capsys.readouterr().out


def test_adaptive_without_init_is_usage_error(workspace):
    _, data, _ = workspace
    assert main(["train", "--data", str(data), "--stage", "adaptive"]) == EXIT_USAGE


def test_config_file_supplies_defaults(workspace, tmp_path):
    _, data, ui = workspace
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"grid": "0,0.5", "epochs": 1, "hop": 32}))
    out = tmp_path / "curve"
    assert main(["--config", str(cfg), "--out", str(out), "finetune-curve", "--data", str(data),
                 "--model", str(ui)]) == EXIT_OK
    curve = json.loads((out / "finetune_curve.json").read_text())
    assert curve["minutes"] == [0.0, 0.5]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["--config", str(bad), "inspect", "--session", "x"]) == EXIT_USAGE


def test_replay_infer_live_and_inspect(workspace, tmp_path, capsys):
    _, data, ui = workspace
    frames = data / "sessions" / "s00_03.frames.csv"
    assert frames.exists()
    wire = tmp_path / "wire.bin"
    assert main(["replay", "--session", str(frames), "--to", str(wire), "--fast",
                 "--limit", "200"]) == EXIT_OK
    assert wire.stat().st_size == 200 * 49
    preds = tmp_path / "p.jsonl"
    assert main(["infer-live", "--source", str(wire), "--model", str(ui),
                 "--skeleton", str(data / "subject00.skeleton.json"),
                 "--predictions", str(preds), "--no-drop"]) == EXIT_OK
    lines = preds.read_text().splitlines()
    assert len(lines) == 21
    assert set(json.loads(lines[0])) == {"t_us", "joints", "latency_us", "dropped"}
    capsys.readouterr()
    assert main(["inspect", "--session", str(frames)]) == EXIT_OK
    stats = json.loads(capsys.readouterr().out)
    assert stats["rate_hz"] == pytest.approx(32.0, rel=1e-3) and stats["gaps"] == 0


def test_exit_codes(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK
    assert main(["inspect", "--session", str(tmp_path / "missing.csv")]) == EXIT_DATA
    bad = tmp_path / "bad.csv"
    bad.write_text("seq,t_us,ch0\n1,2,3\n")
    assert main(["inspect", "--session", str(bad)]) == EXIT_DATA
    assert main(["eval", "--data", str(tmp_path)]) == EXIT_DATA


def test_numeric_failure_exit_code(workspace, monkeypatch):
    from seamcap import neuralnet
    from seamcap.exceptions import DivergenceDetected

    def boom(*a, **k):
        raise DivergenceDetected("validation loss exploded")
    monkeypatch.setattr(neuralnet, "train", boom)
    _, data, _ = workspace
    assert main(["train", "--data", str(data), "--hidden", "8", "--epochs", "1"]) == EXIT_NUMERIC


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "seamcap.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "infer-live" in r.stdout
