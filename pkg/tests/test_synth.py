from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from agrifuse.composite import UnusableFieldError, composite, load_scenes
from agrifuse.evaluation import r2
from agrifuse.pipeline import RunConfig, Workspace, ingest, load_fields
from agrifuse.synth import SynthConfig, generate_dataset, read_latent_truth
from agrifuse.io import read_fgr, read_yield_csv
from agrifuse.yield_ingest import clean_yield_points

SMALL = dict(n_farms=2, fields_per_farm=2, field_cols=6, field_rows=5)


def digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def oracle_r2(root: Path, work: Path) -> float:
    fields = load_fields(root)
    ingest(root, Workspace(work), fields, RunConfig())
    latent = read_latent_truth(root)
    ys, ls = [], []
    for fd in fields:
        t = read_fgr(Workspace(work).target(fd.field_id))
        ok = ~t.nodata_mask[0]
        ys.append(t.values[0][ok])
        ls.append(latent[fd.field_id][ok])
    return r2(np.concatenate(ys), np.concatenate(ls))


def test_reruns_are_byte_identical(tmp_path):
    generate_dataset(SynthConfig(seed=4, **SMALL), tmp_path / "a")
    generate_dataset(SynthConfig(seed=4, **SMALL), tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    generate_dataset(SynthConfig(seed=5, **SMALL), tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_noise_free_oracle_is_perfect(tmp_path):
    generate_dataset(SynthConfig(noise_sd=0.0, **SMALL), tmp_path / "d")
    assert oracle_r2(tmp_path / "d", tmp_path / "w") == pytest.approx(1.0, abs=1e-6)


@pytest.mark.slow
def test_bayes_r2_target(tmp_path):
    cfg = SynthConfig(n_farms=4, fields_per_farm=10, field_cols=16, field_rows=16, seed=2)
    summary = generate_dataset(cfg, tmp_path / "d")
    assert summary["n_pixels"] >= 10_000
    assert summary["bayes_r2"] == pytest.approx(0.8, abs=1e-9)
    assert oracle_r2(tmp_path / "d", tmp_path / "w") == pytest.approx(0.8, abs=0.02)


def test_fully_clouded_fields_are_unusable(tmp_path):
    generate_dataset(SynthConfig(cloud_prob=1.0, **SMALL), tmp_path / "d")
    fd = load_fields(tmp_path / "d")[0]
    with pytest.raises(UnusableFieldError):
        composite(load_scenes(tmp_path / "d", fd.field_id), fd.season)


def test_dirty_counts_match_cleaning(tmp_path):
    root = tmp_path / "d"
    generate_dataset(SynthConfig(seed=1, **SMALL), root)
    expected = json.loads((root / "dirty_counts.json").read_text())
    points = read_yield_csv(root / "yield.csv")
    for fd in load_fields(root):
        mine = [p for p in points if p.field_id == fd.field_id]
        _, report = clean_yield_points(mine, grid=fd.grid)
        got = report.to_dict()
        got.pop("removed")
        assert got == expected[fd.field_id], fd.field_id


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(cloud_prob=1.5)
    with pytest.raises(ValueError):
        SynthConfig(n_farms=0)
    with pytest.raises(ValueError):
        SynthConfig(noise_sd=-1.0)
