from __future__ import annotations

import json
import os
import subprocess
import sys

import pytest

from agrifuse.cli import main

FAST = {"gbdt": {"max_iterations": 20, "num_leaves": 6, "min_samples_leaf": 5, "early_stopping_rounds": 5}, "k": 3}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(["synth", "--out", str(data), "--n-farms", "2", "--fields-per-farm", "3", "--field-size", "6", "--seed", "3"])
    assert rc == 0
    cfg = root / "run.json"
    cfg.write_text(json.dumps(FAST))
    return root, data, cfg


def run(*argv):
    return main([str(a) for a in argv])


def test_pipeline_end_to_end(dataset, capsys):
    root, data, cfg = dataset
    work = root / "work"
    common = ["--data", data, "--work", work, "--config", cfg]
    assert run("ingest", *common) == 0
    assert run("composite", *common) == 0
    capsys.readouterr()
    assert run("fuse", *common, "--modalities", "s2") == 0
    fuse_out = json.loads(capsys.readouterr().out)
    assert fuse_out["n_features"] == 12 and fuse_out["fields"] == 6
    assert run("cv", *common, "--modalities", "s2,dem") == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("fold,n_fields,n_pixels,field_mape")
    cv_dir = work / "cv" / "gbdt_S2-DEM"
    first = (cv_dir / "metrics.csv").read_bytes()
    meta = json.loads((cv_dir / "run_metadata.json").read_text())
    assert meta["seed"] == 0 and meta["config"]["k"] == 3 and len(meta["config_hash"]) == 16
    assert len(list((cv_dir / "predictions").glob("*.fgr"))) == 6

    assert run("cv", *common, "--modalities", "s2,dem") == 0
    assert (cv_dir / "metrics.csv").read_bytes() == first

    fid = json.loads((data / "fields.json").read_text())[0]["field_id"]
    assert run("report", *common, "--modalities", "s2,dem", "--field-id", fid) == 0
    panels = work / "report" / "gbdt_S2-DEM" / fid
    assert len([p for p in panels.iterdir() if p.suffix in (".ppm", ".svg")]) == 6


def test_flags_override_config(dataset, capsys):
    root, data, cfg = dataset
    work = root / "work_k2"
    assert run("cv", "--data", data, "--work", work, "--config", cfg, "--modalities", "s2", "--k", "3", "--seed", "7") == 0
    meta = json.loads((work / "cv" / "gbdt_S2" / "run_metadata.json").read_text())
    assert meta["config"]["k"] == 3 and meta["seed"] == 7
    assert meta["config"]["gbdt"]["max_iterations"] == 20


def test_k_floor(dataset, capsys, tmp_path):
    root, data, cfg = dataset
    assert run("cv", "--data", data, "--work", tmp_path, "--k", "2") == 1
    assert "k must be >= 3" in capsys.readouterr().err


def test_usage_error(capsys):
    assert main(["cv", "--data", "x"]) == 2
    assert capsys.readouterr().err.startswith("error: cli: ")


def test_runtime_error_line(dataset, capsys, tmp_path):
    root, data, cfg = dataset
    rc = run("cv", "--data", data, "--work", tmp_path, "--modalities", "weather")
    err = capsys.readouterr().err.strip()
    assert rc == 1
    assert len(err.splitlines()) == 1
    assert err.startswith("error: fusion: ModalityError: ")


def test_missing_dataset(tmp_path, capsys):
    assert run("ingest", "--data", tmp_path / "nope", "--work", tmp_path) == 1
    assert capsys.readouterr().err.startswith("error: pipeline: FileNotFoundError: ")


def test_console_script(tmp_path):
    env = dict(os.environ)
    proc = subprocess.run(
        [sys.executable, "-m", "agrifuse.cli", "--version"], capture_output=True, text=True, env=env
    )
    assert proc.returncode == 0 and proc.stdout.strip()
