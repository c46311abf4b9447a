import json
import math

import numpy as np
import pandas as pd
import pytest

import main as cli
from analysis.metrics import horizon_leaks
from bootstrap.config_loader import load_run_config
from core.data import generate_synthetic, make_windows, split_windows
from retrieval.kb_io import load_kb


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def manifest(path) -> dict:
    return json.loads((path.parent / f"{path.name}.manifest.json").read_text())


def common(tiny_yaml):
    return ["--config", tiny_yaml, "--profile", "tiny"]


def test_verify_theory_reports_bound(tmp_path):
    out = tmp_path / "v.json"
    assert run("verify-theory", "--k", 5, "--sigma2", 1, "--trials", 5000, "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["bound"] == pytest.approx(0.2)
    assert manifest(out)["status"] == "ok"


def test_build_kb_is_deterministic(tmp_path, tiny_yaml):
    a, b = tmp_path / "a.kb", tmp_path / "b.kb"
    assert run("build-kb", *common(tiny_yaml), "--input", "synthetic", "--split", "all", "--out", a) == 0
    assert run("build-kb", *common(tiny_yaml), "--input", "synthetic", "--split", "all", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    # 3 channels of length 60, T=16, L=4, stride 4
    assert len(load_kb(a)) == 3 * ((60 - 16 - 4) // 4 + 1)
    m = manifest(a)
    assert m["resolved_config"]["train"]["T"] == 16
    assert str(a) in m["output_paths"]


def test_missing_input_exits_2_and_names_the_path(tmp_path, tiny_yaml, capsys):
    out = tmp_path / "kb.bin"
    assert run("build-kb", *common(tiny_yaml), "--input", tmp_path / "nope.csv", "--out", out) == 2
    assert "nope.csv" in capsys.readouterr().err
    m = manifest(out)
    assert m["exit_code"] == 2 and "nope.csv" in m["error"]


def test_invalid_ablation_lists_options(tmp_path, tiny_yaml, capsys):
    out = tmp_path / "m.ckpt"
    assert run("train", *common(tiny_yaml), "--data", "synthetic", "--ablation", "bogus", "--out", out) == 2
    err = capsys.readouterr().err
    assert "no_retrieval" in err and "plain" in err


def test_pipeline_train_forecast_eval(tmp_path, tiny_yaml):
    kb, ckpt = tmp_path / "kb.bin", tmp_path / "m.ckpt"
    assert run("build-kb", *common(tiny_yaml), "--input", "synthetic", "--split", "train", "--out", kb) == 0
    assert run("train", *common(tiny_yaml), "--data", "synthetic", "--kb", kb, "--out", ckpt) == 0
    assert ckpt.exists()
    lines = (tmp_path / "m.ckpt.metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [0, 3, 6]

    f1, f2 = tmp_path / "f1.csv", tmp_path / "f2.csv"
    for f in (f1, f2):
        assert run("forecast", *common(tiny_yaml), "--checkpoint", ckpt, "--kb", kb,
                   "--input", "synthetic", "--out", f) == 0
    assert f1.read_bytes() == f2.read_bytes()
    frame = pd.read_csv(f1)
    assert len(frame) == 3 * 11 * 4
    assert {"y_hat", "y_inv", "y_dyn", "retrieved_ids", "omega"} <= set(frame.columns)

    report = tmp_path / "eval.json"
    assert run("eval", *common(tiny_yaml), "--checkpoint", ckpt, "--kb", kb,
               "--data", "synthetic", "--out", report) == 0
    metrics = json.loads(report.read_text())
    assert metrics["n_windows"] > 0 and set(metrics["per_component"]) == {"seasonal", "trend"}


def test_eval_on_empty_data_exits_2(tmp_path, tiny_yaml):
    ckpt = tmp_path / "m.ckpt"
    assert run("train", *common(tiny_yaml), "--data", "synthetic", "--ablation", "plain", "--out", ckpt) == 0
    short = tmp_path / "short.csv"
    short.write_text("a\n" + "\n".join(str(i) for i in range(10)) + "\n")
    out = tmp_path / "eval.json"
    assert run("eval", *common(tiny_yaml), "--checkpoint", ckpt, "--data", short, "--out", out) == 2
    assert manifest(out)["status"] == "error"


def test_forecast_rejects_kb_with_other_dims(tmp_path, tiny_yaml):
    kb, ckpt = tmp_path / "kb.bin", tmp_path / "m.ckpt"
    assert run("build-kb", *common(tiny_yaml), "--input", "synthetic", "--d", 5, "--out", kb) == 0
    assert run("train", *common(tiny_yaml), "--data", "synthetic", "--ablation", "plain", "--out", ckpt) == 0
    assert run("forecast", *common(tiny_yaml), "--checkpoint", ckpt, "--kb", kb,
               "--input", "synthetic", "--out", tmp_path / "f.csv") == 2


def test_default_kb_holds_no_neighbours_of_held_out_windows(tmp_path, tiny_yaml):
    # window stride 2 < L = 4: neighbouring windows share horizon points
    default, everything = tmp_path / "train.kb", tmp_path / "all.kb"
    assert run("build-kb", *common(tiny_yaml), "--input", "synthetic", "--window-stride", 2, "--out", default) == 0
    assert run("build-kb", *common(tiny_yaml), "--input", "synthetic", "--window-stride", 2,
               "--split", "all", "--out", everything) == 0

    cfg = load_run_config(tiny_yaml, "tiny", {"window_stride": 2}).train
    windows = make_windows(generate_synthetic(load_run_config(tiny_yaml, "tiny").synthetic),
                           cfg.T, cfg.L, cfg.window_stride)
    _, val = split_windows(windows, cfg.val_fraction)
    assert horizon_leaks(load_kb(default), val) == 0
    assert horizon_leaks(load_kb(everything), val) == len(val)


def test_forecast_matches_eval_exactly(tmp_path, tiny_yaml):
    kb, ckpt = tmp_path / "kb.bin", tmp_path / "m.ckpt"
    assert run("build-kb", *common(tiny_yaml), "--input", "synthetic", "--out", kb) == 0
    assert run("train", *common(tiny_yaml), "--data", "synthetic", "--kb", kb, "--out", ckpt) == 0
    out, report = tmp_path / "f.csv", tmp_path / "eval.json"
    assert run("forecast", *common(tiny_yaml), "--checkpoint", ckpt, "--kb", kb,
               "--input", "synthetic", "--out", out) == 0
    assert run("eval", *common(tiny_yaml), "--checkpoint", ckpt, "--kb", kb,
               "--data", "synthetic", "--split", "all", "--out", report) == 0

    frame = pd.read_csv(out, float_precision="round_trip")
    err = frame["y_hat"].to_numpy() - frame["y"].to_numpy()
    metrics = json.loads(report.read_text())
    assert metrics["n_points"] == len(frame)
    assert metrics["mse"] == math.fsum(err * err) / len(err)
    assert metrics["mae"] == math.fsum(np.abs(err)) / len(err)


def test_forecast_uses_the_ablation_the_checkpoint_was_trained_with(tmp_path, tiny_yaml, capsys):
    ckpt, out = tmp_path / "m.ckpt", tmp_path / "f.csv"
    assert run("train", *common(tiny_yaml), "--data", "synthetic", "--ablation", "no_idd", "--out", ckpt) == 0
    kb = tmp_path / "kb.bin"
    assert run("build-kb", *common(tiny_yaml), "--input", "synthetic", "--out", kb) == 0
    assert run("forecast", *common(tiny_yaml), "--checkpoint", ckpt, "--kb", kb,
               "--input", "synthetic", "--out", out) == 0
    frame = pd.read_csv(out, float_precision="round_trip")
    assert (frame["y_inv"] == frame["y_hat"]).all()

    assert run("forecast", *common(tiny_yaml), "--checkpoint", ckpt, "--kb", kb, "--ablation", "full",
               "--input", "synthetic", "--out", out) == 2
    assert "no_idd" in capsys.readouterr().err


def test_ablate_reports_requested_arms(tmp_path, tiny_yaml):
    out = tmp_path / "ablation.json"
    assert run("ablate", *common(tiny_yaml), "--arms", "full,no_retrieval", "--seeds", "0",
               "--steps", 2, "--out", out) == 0
    report = json.loads(out.read_text())
    assert sorted(report["arms"]) == ["full", "no_retrieval"]
    assert report["comparisons"] == []
    assert manifest(out)["status"] == "ok"


def test_ablate_rejects_unknown_arm(tmp_path, tiny_yaml):
    out = tmp_path / "ablation.json"
    assert run("ablate", *common(tiny_yaml), "--arms", "full,bogus", "--out", out) == 2
    assert manifest(out)["status"] == "error"
