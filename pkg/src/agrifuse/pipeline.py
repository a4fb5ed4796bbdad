"""Per-field stage functions shared by the CLI: ingest, composite, fuse."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .adm_prep import aggregate_weather, prepare_soil, prepare_terrain
from .composite import DEFAULT_MIN_SCORE, SceneSeries, composite, load_scenes, series_from_dict
from .fusion import FusedCube, ModalitySelection, assemble_cube, read_fcb, write_fcb
from .grid import FieldDescriptor, Raster
from .io import read_fgr, read_weather_csv, read_yield_csv, write_fgr
from .models.gbdt import GbdtParams
from .models.lstm import LstmParams
from .yield_ingest import DEFAULT_CROP_BOUNDS, DEFAULT_MOISTURE_BOUNDS, CleanReport, clean_yield_points, rasterize_yield

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Every tunable of a run; defaults reproduce the published setup."""

    crop_bounds: Dict[str, Tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_CROP_BOUNDS))
    moisture_bounds: Tuple[float, float] = DEFAULT_MOISTURE_BOUNDS
    cell_aggregate: str = "mean"
    min_scene_score: float = DEFAULT_MIN_SCORE
    weather_mode: str = "sum"
    modalities: str = "s2,weather,soil,dem"
    model: str = "gbdt"
    k: int = 10
    seed: int = 0
    gbdt: GbdtParams = field(default_factory=GbdtParams)
    lstm: LstmParams = field(default_factory=LstmParams)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "crop_bounds" in d:
            d["crop_bounds"] = {k: tuple(v) for k, v in d["crop_bounds"].items()}
        if "moisture_bounds" in d:
            d["moisture_bounds"] = tuple(d["moisture_bounds"])
        if "gbdt" in d:
            d["gbdt"] = GbdtParams(**d["gbdt"])
        if "lstm" in d:
            lp = dict(d["lstm"])
            if "fc" in lp:
                lp["fc"] = tuple(lp["fc"])
            d["lstm"] = LstmParams(**lp)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_bounds"] = {k: list(v) for k, v in self.crop_bounds.items()}
        d["moisture_bounds"] = list(self.moisture_bounds)
        d["lstm"]["fc"] = list(self.lstm.fc)
        return d

    @property
    def selection(self) -> ModalitySelection:
        return ModalitySelection.parse(self.modalities)


def load_fields(data_dir: Path) -> List[FieldDescriptor]:
    path = Path(data_dir) / "fields.json"
    if not path.exists():
        raise FileNotFoundError(f"missing field index {path}")
    fields = [FieldDescriptor.from_dict(d) for d in json.loads(path.read_text())]
    ids = [f.field_id for f in fields]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate field_id in fields.json")
    return sorted(fields, key=lambda f: f.field_id)


class Workspace:
    """Paths of stored stage outputs under one work directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def target(self, fid: str) -> Path:
        return self.root / "ingest" / f"{fid}.fgr"

    def clean_report(self, fid: str) -> Path:
        return self.root / "ingest" / f"{fid}.clean.json"

    def series(self, fid: str) -> Path:
        return self.root / "composite" / f"{fid}.json"

    def cube(self, tag: str, fid: str) -> Path:
        return self.root / "fuse" / tag / f"{fid}.fcb"

    def cv_dir(self, model: str, tag: str) -> Path:
        return self.root / "cv" / f"{model}_{tag}"


def ingest(data_dir: Path, ws: Workspace, fields: List[FieldDescriptor], cfg: RunConfig) -> Dict[str, CleanReport]:
    points = read_yield_csv(Path(data_dir) / "yield.csv")
    by_field: Dict[str, list] = {}
    for p in points:
        by_field.setdefault(p.field_id, []).append(p)
    reports = {}
    (ws.root / "ingest").mkdir(parents=True, exist_ok=True)
    for fd in fields:
        cleaned, report = clean_yield_points(by_field.get(fd.field_id, []), cfg.crop_bounds, cfg.moisture_bounds, fd.grid)
        write_fgr(ws.target(fd.field_id), rasterize_yield(cleaned, fd.grid, cfg.cell_aggregate))
        ws.clean_report(fd.field_id).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        reports[fd.field_id] = report
    return reports


def composite_field(data_dir: Path, ws: Workspace, fd: FieldDescriptor, cfg: RunConfig) -> SceneSeries:
    series = composite(load_scenes(Path(data_dir), fd.field_id), fd.season, cfg.min_scene_score)
    ws.series(fd.field_id).parent.mkdir(parents=True, exist_ok=True)
    ws.series(fd.field_id).write_text(json.dumps(series.to_dict(), indent=1))
    return series


def load_series(data_dir: Path, ws: Workspace, fd: FieldDescriptor, cfg: RunConfig) -> SceneSeries:
    path = ws.series(fd.field_id)
    if path.exists():
        return series_from_dict(json.loads(path.read_text()), Path(data_dir), fd.field_id)
    return composite_field(data_dir, ws, fd, cfg)


def load_target(data_dir: Path, ws: Workspace, fd: FieldDescriptor, cfg: RunConfig) -> Raster:
    path = ws.target(fd.field_id)
    if not path.exists():
        ingest(data_dir, ws, [fd], cfg)
    return read_fgr(path)


def fuse_field(
    data_dir: Path,
    ws: Workspace,
    fd: FieldDescriptor,
    cfg: RunConfig,
    sel: ModalitySelection,
    weather_daily: Optional[dict] = None,
) -> FusedCube:
    data_dir = Path(data_dir)
    series = load_series(data_dir, ws, fd, cfg)
    target = load_target(data_dir, ws, fd, cfg)
    weather = soil = terrain = None
    if sel.weather:
        if weather_daily is None:
            weather_daily = read_weather_csv(data_dir / "weather.csv")
        weather = aggregate_weather(weather_daily.get(fd.field_id, []), series, fd.season, cfg.weather_mode)
    if sel.soil:
        soil = prepare_soil(read_fgr(data_dir / fd.field_id / "soil.fgr"), fd.grid)
    if sel.dem:
        terrain = prepare_terrain(read_fgr(data_dir / fd.field_id / "dem.fgr"), fd.grid)
    cube = assemble_cube(series, target, sel, weather, soil, terrain, field_id=fd.field_id)
    path = ws.cube(sel.tag, fd.field_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_fcb(path, cube)
    return cube


def load_cubes(
    data_dir: Path, ws: Workspace, fields: List[FieldDescriptor], cfg: RunConfig, sel: ModalitySelection
) -> Tuple[List[FusedCube], Dict[str, str]]:
    """Cubes for every field, reusing stored ones; failures are reported, not raised."""
    cubes: List[FusedCube] = []
    failed: Dict[str, str] = {}
    weather_daily = None
    for fd in fields:
        path = ws.cube(sel.tag, fd.field_id)
        try:
            if path.exists():
                cubes.append(read_fcb(path))
                continue
            if sel.weather and weather_daily is None:
                weather_daily = read_weather_csv(Path(data_dir) / "weather.csv")
            cube = fuse_field(data_dir, ws, fd, cfg, sel, weather_daily)
            if cube.n_pixels == 0:
                raise ValueError("no pixel has both a target and a usable timestep")
            cubes.append(cube)
        except (ValueError, FileNotFoundError) as exc:
            log.warning("field %s skipped: %s", fd.field_id, exc)
            failed[fd.field_id] = str(exc)
    return cubes, failed
