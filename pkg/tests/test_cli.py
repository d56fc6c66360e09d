import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from cardioforge.beat_data import Heartbeat, load_csv, save_csv
from cardioforge.cli import resolve_seed
from cardioforge.errors import ConfigError
from clipipe import pipeline, primary_files, run


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")
    start = time.perf_counter()
    pipeline(a)
    elapsed = time.perf_counter() - start
    pipeline(b)
    return a, b, elapsed


def test_smoke_pipeline_under_five_minutes(two_runs):
    a, _, elapsed = two_runs
    assert elapsed < 300
    summary = (a / "eval" / "summary.txt").read_text()
    assert summary.splitlines()[0].split()[:2] == ["regime", "class"]
    for sub in ("corpus", "std", "sim", "fit", "gan", "gen", "clf", "eval"):
        assert len(list((a / sub).glob("manifest.json"))) == 1


def test_reruns_byte_identical(two_runs):
    a, b, _ = two_runs
    fa, fb = primary_files(a), primary_files(b)
    assert sorted(fa) == sorted(fb)
    different = [k for k in fa if fa[k] != fb[k]]
    assert different == []


def test_manifest_fields(two_runs):
    a, _, _ = two_runs
    man = json.loads((a / "gan" / "manifest.json").read_text())
    assert set(man) == {"command", "config", "seed", "inputs", "outputs", "version", "duration_s"}
    assert man["command"] == "gan-train" and man["seed"] == 3
    assert "training_log.csv" in man["outputs"] and man["duration_s"] >= 0


def test_augmentation_picks_class_multiple(two_runs):
    a, _, _ = two_runs
    log_rows = (a / "clf" / "training_log.csv").read_text().splitlines()
    phase2 = [r for r in log_rows[1:] if r.startswith("2,")]
    # 70 training beats plus 1.0 x 10 synthetic S beats
    assert phase2 and phase2[0].split(",")[-1] == "80"


def test_simulate_zero_count(tmp_path):
    assert run("simulate", "--out", tmp_path, "--count", 0) == 0
    text = (tmp_path / "beats.csv").read_text()
    assert text.count("\n") == 1 and text.startswith("label,record_id,s0,")


def test_simulate_hundred_round_trip(tmp_path):
    assert run("simulate", "--out", tmp_path, "--count", 100, "--seed", 4) == 0
    ds = load_csv(tmp_path / "beats.csv")
    assert len(ds) == 100 and ds.class_counts["N"] == 100
    save_csv(ds, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "beats.csv").read_bytes()


def test_simulate_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("simulate", "--out", tmp_path / d, "--count", 5, "--class", "V", "--seed", 8) == 0
    assert (tmp_path / "a/beats.csv").read_bytes() == (tmp_path / "b/beats.csv").read_bytes()


def test_bad_eta_file_exit_2(tmp_path, capsys):
    bad = tmp_path / "eta.txt"
    bad.write_text("class,component_name,mean,var\nN,theta_P,xx,0\n")
    assert run("simulate", "--out", tmp_path / "o", "--count", 1, "--eta-file", bad) == 2
    assert "line 2" in capsys.readouterr().err
    assert run("simulate", "--out", tmp_path / "o", "--count", 1, "--eta-file", tmp_path / "nope.txt") == 2


def test_missing_required_flag_exit_2():
    proc = subprocess.run([sys.executable, "-m", "cardioforge.cli", "simulate", "--out", "unused"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr and "--count" in proc.stderr


def test_unknown_command_exit_2():
    assert run("bogus") == 2


def test_computation_failure_exit_1(tmp_path):
    rng = np.random.default_rng(0)
    beats = [Heartbeat(rng.standard_normal(216), "N", record_id="r") for _ in range(8)]
    save_csv(beats, tmp_path / "b.csv")
    (tmp_path / "gan.cfg").write_text("lr = 1e300\nbatch_size = 4\nprobe_size = 4\n")
    with np.errstate(all="ignore"):
        code = run("gan-train", "--out", tmp_path / "g", "--beats", tmp_path / "b.csv", "--regime", "dcgan",
                   "--config", tmp_path / "gan.cfg", "--iterations", 5, "--scale", 0.125)
    assert code == 1
    assert (tmp_path / "g" / "diverged" / "generator.ckpt").exists()


def test_eval_perfect_scores(tmp_path, capsys):
    labels = "NNNSSVVFF"
    beats = [Heartbeat(np.zeros(216), lab, record_id=f"t{i}") for i, lab in enumerate(labels)]
    save_csv(beats, tmp_path / "test.csv")
    rows = ["pN,pS,pV,pF"] + [",".join("1" if c == lab else "0" for c in "NSVF") for lab in labels]
    (tmp_path / "scores.csv").write_text("\n".join(rows) + "\n")
    code = run("eval", "--out", tmp_path / "ev", "--test", tmp_path / "test.csv", "--scores", f"oracle={tmp_path / 'scores.csv'}")
    assert code == 0
    out = capsys.readouterr().out
    rows = [line.split() for line in out.splitlines()[1:]]
    assert [(r[0], r[1], r[-1]) for r in rows] == [("oracle", c, "1.0000") for c in "SVF"]
    curve = (tmp_path / "ev" / "pr_oracle_S.csv").read_text().splitlines()
    assert curve[0] == "threshold,recall,precision" and curve[1] == "1,1,1"


def test_eval_scores_wrong_shape(tmp_path):
    save_csv([Heartbeat(np.zeros(216), "S", record_id="t")], tmp_path / "test.csv")
    (tmp_path / "s.csv").write_text("a,b,c,d\n1,0,0,0\n0,1,0,0\n")
    assert run("eval", "--out", tmp_path / "ev", "--test", tmp_path / "test.csv", "--scores", tmp_path / "s.csv") == 2


def test_seed_env_fallback(monkeypatch):
    monkeypatch.setenv("CARDIOFORGE_SEED", "17")
    assert resolve_seed(None) == 17 and resolve_seed(3) == 3
    monkeypatch.setenv("CARDIOFORGE_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None)
    monkeypatch.delenv("CARDIOFORGE_SEED")
    assert resolve_seed(None) == 0


def test_writes_only_inside_out(tmp_path, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    assert run("make-corpus", "--out", "o", "--train-counts", "N:3", "--test-counts", "V:2", "--seed", 1) == 0
    assert os.listdir(work) == ["o"]
    assert sorted(os.listdir(work / "o")) == ["manifest.json", "test.csv", "train.csv"]


def test_console_script_version():
    proc = subprocess.run([sys.executable, "-m", "cardioforge.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip().startswith("cardioforge ")
