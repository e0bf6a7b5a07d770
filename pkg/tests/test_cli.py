import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fairpair.cli import main
from fairpair.store import load_dataset, save_dataset
from fairpair.synth import format_profile, standard_biased_profile, zero_bias_profile

from conftest import random_dataset

PROFILE = """
dim = 16
images_per_identity = 5
groups = 2
group0.name = crowded
group0.identities = 8
group0.concentration = 20
group0.noise = 0.2
group1.name = sparse
group1.identities = 8
group1.concentration = 2
group1.noise = 0.1
"""


@pytest.fixture
def profile_path(tmp_path):
    p = tmp_path / "profile.cfg"
    p.write_text(PROFILE)
    return p


@pytest.fixture
def pop_path(tmp_path, profile_path, capsys):
    out = tmp_path / "pop.ffeb"
    assert main(["synth", "--profile", str(profile_path), "--seed", "1",
                 "--out", str(out)]) == 0
    capsys.readouterr()
    return out


def run_json(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    assert code == 0, captured.err
    return json.loads(captured.out)


# --- synth ---------------------------------------------------------------------

def test_synth_writes_loadable_file(pop_path):
    ds = load_dataset(pop_path)
    assert ds.n == 80 and ds.dim == 16
    assert ds.labels.attributes == ("crowded", "sparse")


def test_synth_summary_json(tmp_path, profile_path, capsys):
    out = tmp_path / "x.ffeb"
    summary = run_json(capsys, ["synth", "--profile", str(profile_path),
                                "--seed", "2", "--out", str(out)])
    assert summary["n"] == 80 and summary["d"] == 16
    assert summary["hash"] == load_dataset(out).content_hash()


def test_synth_missing_profile_exit_2(tmp_path, capsys):
    code = main(["synth", "--profile", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path / "o.ffeb")])
    assert code == 2
    assert "nope.cfg" in capsys.readouterr().err


def test_synth_bad_profile_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("dim = 16\nwhat = 1\n")
    assert main(["synth", "--profile", str(bad), "--out", str(tmp_path / "o.ffeb")]) == 2


# --- eval ----------------------------------------------------------------------

def test_eval_outputs(tmp_path, pop_path, capsys):
    out_dir = tmp_path / "rep"
    report = run_json(capsys, ["eval", "--in", str(pop_path), "--out-dir", str(out_dir),
                               "--target-fpr", "1e-2", "--k", "5", "--bins", "32"])
    assert (out_dir / "report.json").exists()
    assert (out_dir / "per_identity.csv").exists()
    assert (out_dir / "hist_intra.csv").exists()
    assert (out_dir / "hist_inter.csv").exists()
    on_disk = json.loads((out_dir / "report.json").read_text())
    assert on_disk == report
    assert report["threshold"]["target_fpr"] == 1e-2
    assert report["config"]["k"] == 5
    csv_lines = (out_dir / "per_identity.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 1 + report["dataset"]["g"]


def test_eval_byte_stable(tmp_path, pop_path, capsys):
    args = ["eval", "--in", str(pop_path), "--target-fpr", "2e-2", "--k", "4"]
    d1, d2 = tmp_path / "r1", tmp_path / "r2"
    assert main(args + ["--out-dir", str(d1)]) == 0
    assert main(args + ["--out-dir", str(d2)]) == 0
    capsys.readouterr()
    assert (d1 / "report.json").read_bytes() == (d2 / "report.json").read_bytes()
    assert (d1 / "per_identity.csv").read_bytes() == (d2 / "per_identity.csv").read_bytes()


def test_eval_worker_env_and_flag(tmp_path, pop_path, capsys, monkeypatch):
    d1, d2, d3 = tmp_path / "w1", tmp_path / "w2", tmp_path / "w3"
    base = ["eval", "--in", str(pop_path), "--target-fpr", "1e-2"]
    assert main(base + ["--out-dir", str(d1)]) == 0
    monkeypatch.setenv("FAIRPAIR_WORKERS", "4")
    assert main(base + ["--out-dir", str(d2)]) == 0
    assert main(base + ["--out-dir", str(d3), "--workers", "2", "--tile", "17"]) == 0
    capsys.readouterr()
    assert (d1 / "report.json").read_bytes() == (d2 / "report.json").read_bytes()
    assert (d1 / "report.json").read_bytes() == (d3 / "report.json").read_bytes()


def test_eval_degenerate_target(tmp_path, pop_path, capsys):
    report = run_json(capsys, ["eval", "--in", str(pop_path),
                               "--out-dir", str(tmp_path / "d"), "--target-fpr", "1"])
    assert report["threshold"]["degenerate"] is True
    assert report["threshold"]["value"] is None


def test_eval_missing_input_exit_3(tmp_path, capsys):
    assert main(["eval", "--in", str(tmp_path / "missing.ffeb"),
                 "--out-dir", str(tmp_path / "o")]) == 3


def test_eval_corrupt_input_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.ffeb"
    bad.write_bytes(b"not a container at all")
    assert main(["eval", "--in", str(bad), "--out-dir", str(tmp_path / "o")]) == 3


def test_eval_bad_fpr_exit_2(tmp_path, pop_path, capsys):
    assert main(["eval", "--in", str(pop_path), "--out-dir", str(tmp_path / "o"),
                 "--target-fpr", "0"]) == 2


def test_eval_single_identity_exit_4(tmp_path, capsys):
    rng = np.random.default_rng(0)
    ds = random_dataset(rng, n=6, g=1, m=1)
    p = tmp_path / "one.ffeb"
    save_dataset(p, ds)
    assert main(["eval", "--in", str(p), "--out-dir", str(tmp_path / "o")]) == 4


# --- analyze --------------------------------------------------------------------

def test_analyze_summary(tmp_path, pop_path, capsys):
    out_csv = tmp_path / "sim.csv"
    summary = run_json(capsys, ["analyze", "--in", str(pop_path), "--k", "6",
                                "--out", str(out_csv)])
    assert summary["k"] == 6
    crowded, sparse = summary["groups"]["crowded"], summary["groups"]["sparse"]
    assert crowded["identities"] == 8 and sparse["identities"] == 8
    assert crowded["mean_s_inter"] > sparse["mean_s_inter"]
    lines = out_csv.read_text().strip().splitlines()
    assert lines[0].startswith("identity,name,attribute")
    assert len(lines) == 17


# --- train-toy -------------------------------------------------------------------

@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("toy")
    profile = tmp / "p.cfg"
    profile.write_text(PROFILE.replace("dim = 16", "dim = 8"))
    data = tmp / "train.ffeb"
    code = main(["synth", "--profile", str(profile), "--seed", "4",
                 "--out", str(data), "--raw-dim", "8"])
    assert code == 0
    out_dir = tmp / "run"
    code = main(["train-toy", "--data", str(data), "--out-dir", str(out_dir),
                 "--epochs", "2", "--batch-size", "20", "--d-k", "6", "--d-f", "4",
                 "--k", "4", "--bins", "16"])
    assert code == 0
    return out_dir


def test_train_toy_artifacts(train_run):
    assert (train_run / "model.ffmp").exists()
    assert (train_run / "trace.csv").exists()
    assert (train_run / "report.json").exists()
    trace_lines = (train_run / "trace.csv").read_text().strip().splitlines()
    assert trace_lines[0] == "iteration,mean_abs_eps,loss"
    assert len(trace_lines) > 2


def test_train_toy_model_loadable(train_run):
    from fairpair.model import load_model
    params = load_model(train_run / "model.ffmp")
    assert params.d_k == 6 and params.d_f == 4


def test_train_toy_summary_fields(tmp_path, capsys):
    profile = tmp_path / "p.cfg"
    profile.write_text(PROFILE.replace("dim = 16", "dim = 8"))
    data = tmp_path / "t.ffeb"
    assert main(["synth", "--profile", str(profile), "--seed", "4",
                 "--out", str(data), "--raw-dim", "8"]) == 0
    capsys.readouterr()
    summary = run_json(capsys, ["train-toy", "--data", str(data),
                                "--out-dir", str(tmp_path / "run"),
                                "--mode", "cosface", "--epochs", "1",
                                "--batch-size", "20", "--d-k", "6", "--d-f", "4",
                                "--k", "4", "--bins", "8"])
    for key in ("mode", "iterations", "final_loss", "tail_mean_abs_eps",
                "ifpr_std", "afpr_std"):
        assert key in summary, key
    assert summary["mode"] == "cosface"


# --- grad-check ---------------------------------------------------------------------

def test_grad_check_passes(capsys):
    assert main(["grad-check", "--configs", "4", "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert "pass" in out


def test_grad_check_catches_negated_gradients(capsys):
    assert main(["grad-check", "--configs", "2", "--negate-analytic"]) == 1


# --- convert -------------------------------------------------------------------------

def test_convert_roundtrip(tmp_path, pop_path, capsys):
    csv_path = tmp_path / "x.csv"
    back_path = tmp_path / "back.ffeb"
    assert main(["convert", "--in", str(pop_path), "--out", str(csv_path)]) == 0
    assert main(["convert", "--in", str(csv_path), "--out", str(back_path)]) == 0
    capsys.readouterr()
    a, b = load_dataset(pop_path), load_dataset(back_path)
    assert a.vectors.tobytes() == b.vectors.tobytes()
    assert [a.labels.identities[k] for k in a.identity] == \
           [b.labels.identities[k] for k in b.identity]


def test_convert_unknown_extension_exit_2(tmp_path, pop_path, capsys):
    assert main(["convert", "--in", str(pop_path), "--out", str(tmp_path / "x.xyz")]) == 2


# --- process-level smoke ---------------------------------------------------------------

def test_module_entrypoint_runs(tmp_path, profile_path):
    out = tmp_path / "p.ffeb"
    proc = subprocess.run(
        [sys.executable, "-m", "fairpair.cli", "synth", "--profile", str(profile_path),
         "--seed", "0", "--out", str(out)],
        capture_output=True, text=True, cwd="/root/pkg",
        env={**os.environ, "PYTHONPATH": "/root/pkg/src"},
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
    # progress chatter goes to stderr, machine output to stdout
    json.loads(proc.stdout)
    assert "[fairpair]" in proc.stderr
