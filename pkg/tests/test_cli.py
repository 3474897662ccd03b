import csv
import hashlib
import io
import subprocess
import sys
import time

import pytest

from advconnect.cli import main

SMALL = """
[bezier]
iterations = 4
[connect]
cases = 2
settings = ["A", "B"]
[compare]
cases = 2
[ea]
max_generations = 3
"""


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out)]) == 0
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL)
    return out, cfg


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_is_reproducible(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--out", str(tmp_path / "b")]) == 0
    assert "test accuracy" in capsys.readouterr().out
    assert sha(tmp_path / "a" / "model.json") == sha(tmp_path / "b" / "model.json")
    assert main(["train", "--out", str(tmp_path / "c"), "--seed", "7"]) == 0
    assert sha(tmp_path / "a" / "model.json") != sha(tmp_path / "c" / "model.json")


def test_unknown_config_key_is_named(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[bezier]\nitertions = 3\n")
    assert main(["connect", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "bezier.itertions" in capsys.readouterr().err


def test_wrong_type_in_config(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('[connect]\ncases = "many"\n')
    assert main(["connect", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "connect.cases" in capsys.readouterr().err


def test_missing_model_points_at_train(tmp_path, capsys):
    assert main(["connect", "--out", str(tmp_path / "empty")]) == 2
    err = capsys.readouterr().err
    assert "not found" in err and "advconnect train" in err


def test_linear_flag_adds_rows(trained):
    out, cfg = trained
    assert main(["connect", "--config", str(cfg), "--out", str(out), "--norm", "linf"]) == 0
    assert main(["connect", "--config", str(cfg), "--out", str(out), "--norm", "linf", "--linear", "--tag", "lin"]) == 0
    plain = list(csv.DictReader(io.StringIO((out / "connect.csv").read_text())))
    both = list(csv.DictReader(io.StringIO((out / "connect-lin.csv").read_text())))
    assert {r["Path"] for r in plain} == {"bezier"}
    assert {r["Path"] for r in both} == {"bezier", "linear"}


def test_outputs_are_never_overwritten(trained, capsys):
    out, cfg = trained
    args = ["connect", "--config", str(cfg), "--out", str(out), "--setting", "A", "--norm", "l2"]
    assert main(args) == 0
    before = sha(out / "connect.csv")
    assert main(args) == 2
    assert "already exists" in capsys.readouterr().err
    assert sha(out / "connect.csv") == before
    assert main(["train", "--out", str(out)]) == 2


def test_compare_csv_shape(trained):
    out, cfg = trained
    assert main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.reader(io.StringIO((out / "compare.csv").read_text())))
    assert rows[0] == [
        "Norm",
        "Method",
        "Runs",
        "Succ. rate mean",
        "Succ. rate std",
        "Avg. gen. mean",
        "Avg. gen. std",
        "Avg. queries mean",
        "Avg. queries std",
        "Avg. backwards mean",
        "Avg. backwards std",
    ]
    assert [(r[0], r[1]) for r in rows[1:]] == [
        (n, m) for n in ("linf", "l2", "l1") for m in ("traditional", "moco-ea")
    ]
    assert (out / "compare_time.csv").exists() and (out / "compare_improvement.csv").exists()


def test_rerun_is_byte_identical(trained):
    out, cfg = trained
    for tag, threads in (("t1", "1"), ("t3", "3")):
        assert main(["connect", "--config", str(cfg), "--out", str(out), "--tag", tag, "--threads", threads]) == 0
    assert (out / "connect-t1.csv").read_bytes() == (out / "connect-t3.csv").read_bytes()
    assert (out / "connect-t1.jsonl").read_bytes() == (out / "connect-t3.jsonl").read_bytes()


def test_selftest_passes_quickly():
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "advconnect.cli", "selftest"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert time.perf_counter() - start < 30
    assert "FAIL" not in proc.stdout


def test_selftest_catches_a_broken_projection():
    proc = subprocess.run(
        [sys.executable, "-m", "advconnect.cli", "selftest", "--corrupt", "l1-projection"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode != 0
    assert "l1 projection" in proc.stdout + proc.stderr
