from __future__ import annotations

from datetime import date, datetime

import numpy as np
import pytest

from agrifuse.composite import S2_BANDS, Scene
from agrifuse.grid import GeoGrid, Raster
from agrifuse.yield_ingest import YieldPointRecord


def make_grid(cols=10, rows=10, cell=10.0, x0=0.0, y0=0.0):
    return GeoGrid("LOCAL", x0, y0, cell, cols, rows)


def make_raster(arr, grid=None, names=None, cell=10.0):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    grid = grid or make_grid(arr.shape[2], arr.shape[1], cell)
    names = names or tuple(f"b{i}" for i in range(arr.shape[0]))
    return Raster(grid, names, arr)


def make_scene(when, grid, valid=None, value=0.1):
    bands = Raster(grid, S2_BANDS, np.full((12,) + grid.shape, value, dtype=np.float32))
    valid = np.ones(grid.shape, bool) if valid is None else valid
    return Scene(when, bands, valid)


def point(x=5.0, y=5.0, yld=5.0, moist=15.0, active=True, ts=datetime(2021, 7, 1, 12), crop="soybean", fid="F1"):
    return YieldPointRecord(fid, "farm", crop, x, y, ts, yld, moist, active)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, filled by test_acceptance.py and printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
