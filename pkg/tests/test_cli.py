import subprocess
import sys
from pathlib import Path

import pytest

from emagnn.cli import MANIFEST, main

SMALL = ["--n", "2", "--variables", "5", "--timepoints", "40"]
FAST = ["--epochs", "2", "--hidden", "4"]


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["generate", "--out", str(out), "--seed", "4", *SMALL]) == 0
    return out


def test_generate_outputs(cohort_dir):
    assert (cohort_dir / "cohort.csv").exists() and (cohort_dir / "raw_cohort.csv").exists()
    assert len(list((cohort_dir / "planted").glob("*.csv"))) == 2
    assert (cohort_dir / MANIFEST).exists()


def test_graph_writes_one_file_per_individual(cohort_dir, tmp_path):
    assert main(["graph", "--in", str(cohort_dir / "cohort.csv"), "--metric", "DTW", "--out", str(tmp_path)]) == 0
    assert len([p for p in tmp_path.glob("*.csv")]) == 2


def test_train_writes_records_and_checkpoints(cohort_dir, tmp_path):
    code = main(["train", "--in", str(cohort_dir / "cohort.csv"), "--family", "GRAPH_LEARN", "--graph",
                 str(cohort_dir / "planted"), "--out", str(tmp_path), *FAST])
    assert code == 0
    assert len((tmp_path / "records.csv").read_text().splitlines()) == 3
    assert list((tmp_path / "checkpoints").glob("*.json"))


def test_bad_gdt_is_a_usage_error(cohort_dir, tmp_path, capsys):
    code = main(["graph", "--in", str(cohort_dir / "cohort.csv"), "--gdt", "1.5", "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "--gdt" in err and len(err.strip().splitlines()) == 1


@pytest.mark.parametrize("argv", [["graph", "--out", "x"], ["experiment", "--out", "x"],
                                  ["train", "--in", "c.csv", "--out", "x", "--family", "CNN"], ["bogus"]])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_missing_input_is_a_runtime_error(tmp_path, capsys):
    assert main(["graph", "--in", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "experiment" in capsys.readouterr().out


def test_experiment_is_repeatable(cohort_dir, tmp_path):
    argv = ["experiment", "--which", "C", "--in", str(cohort_dir / "cohort.csv"), "--seed", "2", *FAST]
    assert main([*argv, "--out", str(tmp_path / "a")]) == 0
    assert main([*argv, "--out", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert (tmp_path / "a" / "report_c.csv").exists()


def test_manifest_replay_is_identical(tmp_path):
    argv = ["experiment", "--which", "A", "--seq-len", "1", "2", *SMALL, *FAST]
    assert main([*argv, "--out", str(tmp_path / "first")]) == 0
    manifest = tmp_path / "first" / MANIFEST
    assert main(["experiment", "--config", str(manifest), "--out", str(tmp_path / "replay")]) == 0
    assert tree(tmp_path / "first") == tree(tmp_path / "replay")


def test_nothing_written_outside_out(cohort_dir, tmp_path, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    out = tmp_path / "out"
    assert main(["experiment", "--which", "B", "--gdt", "0.4", "--random-repeats", "1",
                 "--in", str(cohort_dir / "cohort.csv"), "--out", str(out), *FAST]) == 0
    assert list(work.iterdir()) == []
    assert (out / "report_b.csv").exists()


def test_inspect(cohort_dir, tmp_path, capsys):
    assert main(["inspect", str(cohort_dir / "cohort.csv")]) == 0
    assert "individuals 2" in capsys.readouterr().out
    graph = next((cohort_dir / "planted").glob("*.csv"))
    assert main(["inspect", str(graph)]) == 0
    assert "lambda_max" in capsys.readouterr().out
    main(["train", "--in", str(cohort_dir / "cohort.csv"), "--family", "LSTM", "--out", str(tmp_path), *FAST])
    ckpt = next((tmp_path / "checkpoints").glob("*.json"))
    capsys.readouterr()
    assert main(["inspect", str(ckpt)]) == 0
    assert "family     LSTM" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "emagnn.cli", "graph", "--gdt", "0", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
