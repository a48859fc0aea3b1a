import json
from pathlib import Path

import pytest

from plexsim.cli import main
from plexsim.traces import load_device_profiles, load_latency_matrix


TINY = {
    "algorithm": "plexus",
    "n": 8,
    "sample_size": 3,
    "protocol_seed": 11,
    "targets": [0.5],
    "trainer": {"eta": 0.1, "batch_size": 16, "local_steps": 2},
    "dataset": {"seed": 5, "n_samples": 300, "d_in": 4, "classes": 3, "class_sep": 3.0},
    "traces": {"cities": 3, "seed": 2},
    "stop": {"max_rounds": 4, "max_virtual_s": 1e7},
    "eval": {"every_rounds": 2, "every_seconds": 50.0},
}


def write_cfg(tmp_path, name="exp.yaml", **overrides):
    raw = dict(TINY)
    raw.update(overrides)
    p = tmp_path / name
    # JSON is valid YAML, and json.dumps handles every type we use.
    p.write_text(json.dumps(raw))
    return str(p)


def test_traces_gen(tmp_path, capsys):
    rc = main(["traces-gen", "--out", str(tmp_path / "tr"), "--n", "12", "--cities", "4"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "latency.csv" in out and "profiles.csv" in out
    lm = load_latency_matrix(tmp_path / "tr" / "latency.csv")
    assert len(lm.cities) == 4
    profs = load_device_profiles(tmp_path / "tr" / "profiles.csv")
    assert len(profs) == 12


def test_run_validate(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    rc = main(["run", cfg, "--validate"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("ok ")
    assert cfg in out


def test_run_rejects_bad_config(tmp_path, capsys):
    cfg = write_cfg(tmp_path, algorithm="nonsense")
    rc = main(["run", cfg])
    assert rc == 2
    assert capsys.readouterr().err.startswith("error: ")


def test_run_missing_config(tmp_path, capsys):
    rc = main(["run", str(tmp_path / "nope.yaml")])
    assert rc == 2
    assert "not found" in capsys.readouterr().err


def test_run_executes_and_writes_summary(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out_dir = tmp_path / "results"
    rc = main(["run", cfg, "--out", str(out_dir)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "summary.json" in printed
    assert "target 0.5:" in printed
    with open(out_dir / "summary.json") as fh:
        summary = json.load(fh)
    assert summary["algorithm"] == "plexus"
    assert (out_dir / "rep0" / "accuracy.csv").exists()


def test_run_uses_results_root_env(tmp_path, capsys, monkeypatch):
    cfg = write_cfg(tmp_path)
    monkeypatch.setenv("PLEXSIM_RESULTS", str(tmp_path / "root"))
    rc = main(["run", cfg])
    assert rc == 0
    assert (tmp_path / "root" / "exp" / "summary.json").exists()


def test_sample_prints_participants(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    rc = main(["sample", cfg, "--round", "3", "--count", "2"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    assert lines[0].startswith("round 3 participants: ")
    assert len(lines[0].split(": ")[1].split()) == 3
    assert "aggregator:" in lines[1] and "uplink" in lines[1]
    assert lines[2].startswith("round 4 participants: ")


def test_sweep_runs_each_value(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out_root = tmp_path / "sweep"
    rc = main(
        ["sweep", cfg, "--param", "sample_size", "--values", "2,3", "--out", str(out_root)]
    )
    assert rc == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0].startswith("sample_size,")
    assert (out_root / "sample_size-2" / "summary.json").exists()
    assert (out_root / "sample_size-3" / "summary.json").exists()
    assert (out_root / "sweep.csv").exists()
    sweep_rows = (out_root / "sweep.csv").read_text().strip().splitlines()
    assert len(sweep_rows) == 3  # header + 2 values


def test_sweep_rejects_unknown_param(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    rc = main(["sweep", cfg, "--param", "banana", "--values", "1"])
    assert rc == 2
    assert "unsupported sweep parameter" in capsys.readouterr().err


def test_report_tabulates_summaries(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["run", cfg, "--out", str(a)]) == 0
    assert main(["run", cfg, "--out", str(b)]) == 0
    capsys.readouterr()
    table = tmp_path / "table.csv"
    rc = main(["report", str(a), str(b), "--out", str(table)])
    assert rc == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].startswith("experiment,algorithm,config_hash,target")
    assert len([l for l in printed if l.startswith(str(tmp_path))]) == 2
    assert table.exists()


def test_report_requires_summaries(tmp_path, capsys):
    rc = main(["report", str(tmp_path)])
    assert rc == 2
    assert "no summary.json" in capsys.readouterr().err
