from __future__ import annotations

import csv
import io
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import mean_absolute_percentage_error, r2_score

from agrifuse.evaluation import (
    CVError,
    FarmStratifiedGroupKFold,
    MetricsTable,
    PANELS,
    assign_folds,
    evaluate_cv,
    field_report,
    fold_metrics,
    mape,
    r2,
    render_report,
)
from agrifuse.evaluation.report import read_ppm
from agrifuse.fusion import FusedCube
from agrifuse.grid import FieldDescriptor, Raster, SeasonWindow
from agrifuse.models import GbdtParams
from conftest import make_grid


def test_mape_example():
    assert mape([10.0, 20.0], [11.0, 18.0]) == pytest.approx(0.10, abs=1e-12)


def test_r2_example():
    assert r2([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) == pytest.approx(-3.0, abs=1e-12)


def test_metrics_match_reference(rng):
    for _ in range(100):
        n = int(rng.integers(2, 50))
        y = rng.uniform(0.5, 8.0, n)
        p = y + rng.normal(0, 1.0, n)
        assert abs(mape(y, p) - mean_absolute_percentage_error(y, p)) < 1e-12
        assert abs(r2(y, p) - r2_score(y, p)) < 1e-12


def test_metric_errors():
    with pytest.raises(ValueError):
        mape([1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        mape([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        r2([2.0, 2.0], [1.0, 3.0])
    with pytest.raises(ValueError):
        r2([2.0], [1.0])


# -- folds --------------------------------------------------------------------

def sizes(fa):
    return sorted(len(fa.fields_in(i)) for i in range(fa.k))


def test_single_farm_is_spread_evenly():
    fa = assign_folds([(f"f{i:02d}", "A") for i in range(20)], k=10)
    assert sizes(fa) == [2] * 10


def test_one_field_per_farm():
    fa = assign_folds([(f"f{i}", f"farm{i}") for i in range(10)], k=10)
    assert sizes(fa) == [1] * 10


def test_farms_balanced_across_folds():
    pairs = [(f"{farm}{i}", farm) for farm in "ABCD" for i in range(10)]
    fa = assign_folds(pairs, k=10)
    for i in range(10):
        farms = [fid[0] for fid in fa.fields_in(i)]
        assert sorted(farms) == list("ABCD")


@given(st.integers(10, 40), st.integers(1, 5), st.integers(0, 3), st.randoms(use_true_random=False))
@settings(max_examples=40, deadline=None)
def test_fold_properties(n, n_farms, seed, rnd):
    pairs = [(f"f{i:03d}", f"farm{i % n_farms}") for i in range(n)]
    fa = assign_folds(pairs, k=10, seed=seed)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert assign_folds(shuffled, k=10, seed=seed) == fa
    assert sorted(f for i in range(10) for f in fa.fields_in(i)) == sorted(f for f, _ in pairs)
    assert max(sizes(fa)) - min(sizes(fa)) <= 1


def test_too_few_fields():
    with pytest.raises(ValueError):
        assign_folds([("a", "x"), ("b", "x")], k=3)


def test_sklearn_splitter():
    groups = np.repeat([f"f{i}" for i in range(12)], 5)
    strata = np.repeat([f"farm{i % 3}" for i in range(12)], 5)
    cv = FarmStratifiedGroupKFold(n_splits=4)
    seen = []
    for train, test in cv.split(np.zeros((60, 1)), groups=groups, strata=strata):
        assert not set(groups[train]) & set(groups[test])
        seen.extend(test.tolist())
    assert sorted(seen) == list(range(60))
    with pytest.raises(ValueError):
        next(cv.split(np.zeros((2, 1)), groups=["a", "a"], strata=["x", "y"]))


# -- fold metrics and CV --------------------------------------------------------

def test_fold_metrics_pixel_order(rng):
    y = rng.uniform(1, 5, 60)
    p = y + rng.normal(0, 0.3, 60)
    fi = np.repeat(np.arange(6), 10)
    perm = rng.permutation(60)
    a = fold_metrics(y, p, fi)
    b = fold_metrics(y[perm], p[perm], fi[perm])
    for key in a:
        assert a[key] == pytest.approx(b[key], abs=1e-12)
    perfect = fold_metrics(y, y, fi)
    assert perfect["field_r2"] == 1.0 and perfect["subfield_r2"] == 1.0 and perfect["subfield_mape"] == 0.0


def test_field_metrics_use_field_means():
    y = np.array([1.0, 3.0, 5.0, 7.0])
    p = np.array([3.0, 1.0, 7.0, 5.0])
    m = fold_metrics(y, p, np.array([0, 0, 1, 1]))
    assert m["field_r2"] == 1.0 and m["field_mape"] == 0.0
    assert m["subfield_r2"] < 1.0


def test_metrics_table_csv():
    rows = [
        {"fold": 0, "n_fields": 2, "n_pixels": 10, "field_mape": 0.1, "field_r2": 0.5, "subfield_mape": 0.2, "subfield_r2": 0.4},
        {"fold": 1, "n_fields": 2, "n_pixels": 12, "field_mape": 0.3, "field_r2": 0.7, "subfield_mape": 0.4, "subfield_r2": 0.6},
    ]
    t = MetricsTable(rows)
    assert t.mean["field_mape"] == pytest.approx(0.2)
    lines = list(csv.reader(io.StringIO(t.to_csv())))
    assert lines[0][:3] == ["fold", "n_fields", "n_pixels"]
    assert lines[-1][:3] == ["mean", "4", "22"]


def toy_cube(fid, rng, level):
    n = 20
    v = rng.normal(size=(n, 24, 3)).astype(np.float32)
    v[:, :, 0] += level
    mask = np.ones((n, 24), bool)
    target = (2.0 + level + 0.3 * v[:, 5, 1]).astype(np.float32)
    coords = np.stack([np.arange(n) % 5, np.arange(n) // 5], axis=1)
    return FusedCube(fid, coords, ("a", "b", "c"), v, mask, target)


def test_evaluate_cv_is_deterministic_and_parallel_safe():
    rng = np.random.default_rng(0)
    cubes = [toy_cube(f"f{i:02d}", rng, float(i % 5)) for i in range(12)]
    folds = assign_folds([(c.field_id, f"farm{i % 2}") for i, c in enumerate(cubes)], k=4)
    params = GbdtParams(max_iterations=30, num_leaves=8, min_samples_leaf=5, early_stopping_rounds=5)
    t1, p1 = evaluate_cv(cubes, folds, "gbdt", params, seed=1, n_jobs=1)
    t2, p2 = evaluate_cv(cubes, folds, "gbdt", params, seed=1, n_jobs=3)
    assert t1.to_csv() == t2.to_csv()
    assert sorted(p1) == [c.field_id for c in cubes]
    assert t1.mean["field_r2"] > 0.5


def test_evaluate_cv_errors():
    rng = np.random.default_rng(0)
    cubes = [toy_cube(f"f{i}", rng, 0.0) for i in range(4)]
    folds = assign_folds([(c.field_id, "x") for c in cubes], k=4)
    with pytest.raises(ValueError):
        evaluate_cv(cubes, folds, "forest")
    with pytest.raises(CVError):
        evaluate_cv(cubes[:3], folds, "gbdt")


# -- report -------------------------------------------------------------------

def report_inputs(pred_fn):
    grid = make_grid(4, 3)
    fd = FieldDescriptor("f1", "farmA", "soybean", SeasonWindow(date(2021, 5, 1), date(2021, 10, 1)), grid)
    t = np.linspace(2.0, 6.0, 12, dtype=np.float32).reshape(1, 3, 4)
    p = pred_fn(t).astype(np.float32)
    return fd, Raster(grid, ("yield",), t), Raster(grid, ("yield",), p)


def test_report_six_panels_and_clipping(tmp_path):
    def pred(t):
        out = t.copy()
        out[0, 0, 0] *= 3.5  # 250 % error
        out[0, 1, 1] *= 1.5
        return out

    fd, t, p = report_inputs(pred)
    b = field_report(fd, t, p)
    assert tuple(b.panels) == PANELS
    assert b.panels["relative_error_clipped"][0, 0] == 1.0
    assert b.panels["relative_error_full"][0, 0] == pytest.approx(2.5)
    render_report(b, tmp_path)
    assert len(b.files) == 6
    assert read_ppm(b.files["target_map"]).shape == (3, 4, 3)
    clipped = read_ppm(b.files["relative_error_clipped"])
    full = read_ppm(b.files["relative_error_full"])
    assert not np.array_equal(clipped, full)
    assert (tmp_path / "report.json").exists()


def test_report_constant_prediction():
    fd, t, p = report_inputs(lambda t: np.full_like(t, 4.0))
    assert field_report(fd, t, p).stats["variability_ratio"] == 0.0


def test_report_perfect_prediction():
    fd, t, p = report_inputs(lambda t: t.copy())
    s = field_report(fd, t, p).stats
    assert s["median_abs_relative_error"] == 0.0 and s["distribution_distance"] == 0.0
    assert s["variability_ratio"] == 1.0


def test_report_without_overlap():
    fd, t, p = report_inputs(lambda t: np.full_like(t, -9999.0))
    with pytest.raises(ValueError):
        field_report(fd, t, p)
