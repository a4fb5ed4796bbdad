"""Deterministic synthetic datasets with a known latent yield surface.

Layout written by :func:`generate_dataset`::

    <root>/fields.json                 field descriptors (bbox, season, farm)
    <root>/yield.csv                   raw harvester points incl. dirty rows
    <root>/weather.csv                 daily weather per field
    <root>/<field_id>/s2/scenes.json   scene index
    <root>/<field_id>/s2/<date>.fgr    12 spectral bands + "valid"
    <root>/<field_id>/soil.fgr         24-band soil stack at 250 m
    <root>/<field_id>/dem.fgr          elevation at 30 m
    <root>/latent_truth.csv            field_id,col,row,latent_yield
    <root>/dirty_counts.json           injected dirty points per clean rule
    <root>/synth_config.json

Latent yield per pixel (t/ha)::

    latent = 0.8 + 5.0 * peak + 0.7 * tanh((twi - 8.5) / 2.0) + 0.25 * s + 0.15 * p
    peak   = clip(0.55 + 0.06 * p + 0.05 * s + MGMT_COEF * m + 0.15 * v, 0.15, 0.92)

with ``twi`` the 10 m terrain wetness index, ``s = (soc_0-5 - 50) / 15``,
``p = (season precipitation - 500) / 150``, ``m`` a standard-normal
per-field management effect and ``v`` pixel-scale value noise.
Observed yield adds gaussian noise (clipped at 2.5 sd) to ``latent``.
S2 reflectance follows a phenology curve peaking at NDVI = ``peak``; the
terrain term is invisible to S2, so DEM features carry extra signal.

Dirty points per field: ``max(1, round(rate * n_cells))`` zero yields (2 %),
3-sigma outliers (1 %) and inactive-harvester rows (2 %), plus one each of
invalid position, invalid timestamp, infeasible yield and out-of-range
moisture.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .adm_prep import SOIL_BANDS, SOIL_PROPERTIES, prepare_soil, prepare_terrain
from .composite import S2_BANDS, VALID_BAND, build_intervals
from .grid import FieldDescriptor, GeoGrid, Raster, SeasonWindow, snap_grid
from .io import PathLike, write_csv, write_fgr, write_yield_csv
from .yield_ingest import SIGMA_THRESHOLD

DEM_CELL = 30.0
SOIL_CELL = 250.0
DEM_BUFFER = 150.0
SOIL_BUFFER = 600.0

TWI_REF, TWI_SCALE = 8.5, 2.0
MGMT_COEF = 0.08
SOC_REF, SOC_SCALE = 50.0, 15.0
PRECIP_REF, PRECIP_SCALE = 500.0, 150.0

# (base, amplitude) per soil property; depth shifts base slightly
SOIL_PARAMS = {
    "cec": (200.0, 40.0),
    "cfvo": (80.0, 30.0),
    "nitrogen": (300.0, 60.0),
    "phh2o": (62.0, 6.0),
    "sand": (350.0, 120.0),
    "silt": (380.0, 80.0),
    "soc": (SOC_REF, SOC_SCALE),
    "clay": (270.0, 70.0),
}

# surface reflectance of bare soil and of dense canopy per band
SOIL_SPECTRUM = np.array([0.09, 0.10, 0.13, 0.16, 0.19, 0.21, 0.22, 0.24, 0.25, 0.25, 0.32, 0.28])
VEG_SPECTRUM = np.array([0.03, 0.04, 0.08, 0.03, 0.12, 0.32, 0.40, 0.45, 0.46, 0.46, 0.20, 0.09])
B04, B08 = S2_BANDS.index("B04"), S2_BANDS.index("B08")


@dataclass(frozen=True)
class SynthConfig:
    n_farms: int = 4
    fields_per_farm: int = 10
    field_cols: int = 10
    field_rows: int = 10
    harvest_year: int = 2021
    crop: str = "soybean"
    noise_sd: Optional[float] = None
    target_bayes_r2: float = 0.8
    cloud_prob: float = 0.3
    scene_step_days: int = 5
    reflectance_noise: float = 0.004
    zero_rate: float = 0.02
    outlier_rate: float = 0.01
    inactive_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("n_farms", "fields_per_farm", "field_cols", "field_rows", "scene_step_days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.cloud_prob <= 1.0:
            raise ValueError(f"cloud_prob must lie in [0, 1], got {self.cloud_prob}")
        if self.noise_sd is not None and self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.noise_sd is None and not 0.0 < self.target_bayes_r2 <= 1.0:
            raise ValueError("target_bayes_r2 must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


# -- smooth noise ------------------------------------------------------------

def _hash_uniform(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic uniform [-1, 1] per integer lattice point (splitmix64)."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (
            iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ) ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
        h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        h = h ^ (h >> np.uint64(31))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def value_noise(x: np.ndarray, y: np.ndarray, scale: float, salt: int) -> np.ndarray:
    """Smoothly interpolated lattice noise in [-1, 1] at world coordinates."""
    u, v = np.asarray(x, dtype=np.float64) / scale, np.asarray(y, dtype=np.float64) / scale
    iu, iv = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    fu, fv = u - iu, v - iv
    su, sv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
    n00 = _hash_uniform(iu, iv, salt)
    n10 = _hash_uniform(iu + 1, iv, salt)
    n01 = _hash_uniform(iu, iv + 1, salt)
    n11 = _hash_uniform(iu + 1, iv + 1, salt)
    return (n00 * (1 - su) + n10 * su) * (1 - sv) + (n01 * (1 - su) + n11 * su) * sv


def _grid_coords(grid: GeoGrid) -> Tuple[np.ndarray, np.ndarray]:
    xs, ys = grid.cell_centers()
    return np.meshgrid(xs, ys)


def elevation(x, y, seed: int) -> np.ndarray:
    """Two-octave terrain surface in metres."""
    return 100.0 + 8.0 * value_noise(x, y, 600.0, seed * 7 + 1) + 3.0 * value_noise(x, y, 150.0, seed * 7 + 2)


# -- latent model ------------------------------------------------------------

def phenology_peak(p, s, v, m=0.0) -> np.ndarray:
    return np.clip(0.55 + 0.06 * p + 0.05 * s + MGMT_COEF * m + 0.15 * v, 0.15, 0.92)


def latent_yield(twi: np.ndarray, soc: np.ndarray, precip_sum: float, peak: np.ndarray) -> np.ndarray:
    """Closed-form latent yield (t/ha) from terrain, soil, weather and phenology."""
    s = (np.asarray(soc, dtype=np.float64) - SOC_REF) / SOC_SCALE
    p = (precip_sum - PRECIP_REF) / PRECIP_SCALE
    return 0.8 + 5.0 * peak + 0.7 * np.tanh((np.asarray(twi, dtype=np.float64) - TWI_REF) / TWI_SCALE) + 0.25 * s + 0.15 * p


def ndvi_curve(when: date, season: SeasonWindow, peak: np.ndarray) -> np.ndarray:
    if not season.seeding_date <= when <= season.harvest_date:
        return np.full_like(peak, 0.12)
    length = (season.harvest_date - season.seeding_date).days
    centre = season.seeding_date.toordinal() + 0.6 * length
    width = 0.3 * length
    # flat-topped canopy curve: several months sit near the peak
    g = math.exp(-(((when.toordinal() - centre) / width) ** 4))
    return 0.15 + (peak - 0.15) * g


# -- generation --------------------------------------------------------------

@dataclass
class _FieldPlan:
    desc: FieldDescriptor
    index: int
    rng: np.random.Generator


def _plan_fields(cfg: SynthConfig) -> List[_FieldPlan]:
    plans = []
    n = 0
    for f in range(cfg.n_farms):
        for j in range(cfg.fields_per_farm):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, n]))
            x0 = 100000.0 + f * 20000.0 + (j % 5) * 400.0
            y0 = 200000.0 + (j // 5) * 400.0
            bbox = (x0, y0, x0 + cfg.field_cols * 10.0, y0 + cfg.field_rows * 10.0)
            seeding = date(cfg.harvest_year - 1, 10, 1) + timedelta(days=int(rng.integers(0, 31)))
            harvest = date(cfg.harvest_year, 6, 1) + timedelta(days=int(rng.integers(0, 46)))
            desc = FieldDescriptor(
                field_id=f"F{f:02d}_{j:03d}",
                farm_id=f"farm{f:02d}",
                crop=cfg.crop,
                season=SeasonWindow(seeding, harvest),
                grid=snap_grid(bbox, 10.0, "LOCAL"),
            )
            plans.append(_FieldPlan(desc, n, rng))
            n += 1
    return plans


def _dem_raster(grid: GeoGrid, seed: int) -> Raster:
    g = snap_grid(
        (grid.x_min - DEM_BUFFER, grid.y_min - DEM_BUFFER, grid.x_max + DEM_BUFFER, grid.y_max + DEM_BUFFER),
        DEM_CELL,
        grid.crs_id,
    )
    x, y = _grid_coords(g)
    return Raster(g, ("dem",), elevation(x, y, seed).astype(np.float32)[None])


def _soil_raster(grid: GeoGrid, seed: int) -> Raster:
    g = snap_grid(
        (grid.x_min - SOIL_BUFFER, grid.y_min - SOIL_BUFFER, grid.x_max + SOIL_BUFFER, grid.y_max + SOIL_BUFFER),
        SOIL_CELL,
        grid.crs_id,
    )
    x, y = _grid_coords(g)
    bands = []
    for pi, prop in enumerate(SOIL_PROPERTIES):
        base, amp = SOIL_PARAMS[prop]
        field_ = value_noise(x, y, 1500.0, seed * 31 + 100 + pi)
        for di in range(3):
            bands.append(base * (1.0 - 0.05 * di) + amp * field_)
    return Raster(g, SOIL_BANDS, np.stack(bands).astype(np.float32))


def _weather(plan: _FieldPlan, cfg: SynthConfig) -> List[tuple]:
    rng = plan.rng
    start = date(cfg.harvest_year - 1, 1, 1)
    end = date(cfg.harvest_year, 12, 31)
    offset = rng.normal(0.0, 1.5)
    wetness = rng.uniform(0.6, 1.4)
    rows = []
    d = start
    while d <= end:
        doy = d.timetuple().tm_yday
        tmean = 12.0 + 9.0 * math.sin(2 * math.pi * (doy - 105) / 365.25) + offset + rng.normal(0.0, 2.0)
        tmin = tmean - 4.0 - abs(rng.normal(0.0, 1.5))
        tmax = tmean + 4.0 + abs(rng.normal(0.0, 1.5))
        precip = rng.exponential(6.0 * wetness) if rng.random() < 0.3 else 0.0
        rows.append((d, round(tmin, 3), round(tmax, 3), round(tmean, 3), round(precip, 3)))
        d += timedelta(days=1)
    return rows


def _season_precip(weather: List[tuple], season: SeasonWindow) -> float:
    return float(sum(r[4] for r in weather if season.seeding_date < r[0] <= season.harvest_date))


def _scenes(plan: _FieldPlan, cfg: SynthConfig, peak: np.ndarray) -> List[Tuple[date, Raster]]:
    rng = plan.rng
    grid = plan.desc.grid
    season = plan.desc.season
    first = date(*build_intervals(season.harvest_date)[0], 1)
    last = date(season.harvest_date.year, 12, 31)
    d = first + timedelta(days=int(rng.integers(0, cfg.scene_step_days)))
    out = []
    while d <= last:
        cloudy = rng.random() < cfg.cloud_prob
        noise = rng.normal(0.0, cfg.reflectance_noise, (len(S2_BANDS),) + grid.shape)
        if cloudy:
            bands = 0.45 + np.abs(noise) * 10.0
            valid = np.zeros(grid.shape)
        else:
            ndvi = ndvi_curve(d, season, peak)
            frac = np.clip((ndvi - 0.12) / 0.8, 0.0, 1.0)
            bands = SOIL_SPECTRUM[:, None, None] * (1 - frac) + VEG_SPECTRUM[:, None, None] * frac
            nir = 0.22 + 0.3 * ndvi
            bands[B08] = nir
            bands[B04] = nir * (1 - ndvi) / (1 + ndvi)
            bands = bands + noise
            valid = np.ones(grid.shape)
        data = np.concatenate([bands, valid[None]]).astype(np.float32)
        out.append((d, Raster(grid, S2_BANDS + (VALID_BAND,), data)))
        d += timedelta(days=cfg.scene_step_days)
    return out


def _latent_for_field(plan: _FieldPlan, cfg: SynthConfig, dem: Raster, soil: Raster, precip: float):
    grid = plan.desc.grid
    terrain = prepare_terrain(dem, grid)
    soil10 = prepare_soil(soil, grid)
    if terrain.band_mask("twi").any() or soil10.band_mask("soc_0-5").any():
        raise RuntimeError(f"{plan.desc.field_id}: ancillary rasters do not cover the field")
    x, y = _grid_coords(grid)
    v = value_noise(x, y, 40.0, cfg.seed * 13 + 5)
    s = (soil10.band("soc_0-5").astype(np.float64) - SOC_REF) / SOC_SCALE
    p = (precip - PRECIP_REF) / PRECIP_SCALE
    # separate stream so the management draw leaves the other draws untouched
    m = np.random.default_rng(np.random.SeedSequence([cfg.seed, plan.index, 1])).normal()
    peak = phenology_peak(p, s, v, m)
    latent = latent_yield(terrain.band("twi"), soil10.band("soc_0-5"), precip, peak)
    return latent, peak


def _yield_rows(plan: _FieldPlan, cfg: SynthConfig, latent: np.ndarray, noise_sd: float):
    """Clean per-cell points plus injected dirty rows; returns (rows, dirty counts)."""
    rng = plan.rng
    d = plan.desc
    g = d.grid
    base_ts = datetime.combine(d.season.harvest_date, datetime.min.time()).replace(hour=9)
    rows_out = []
    n_cells = g.rows * g.cols
    # clipped at 2.5 sd so that no clean point reaches the 3-sigma filter
    noise = np.clip(rng.normal(0.0, 1.0, g.shape), -2.5, 2.5) * noise_sd
    observed = latent + noise

    n_zero = max(1, round(cfg.zero_rate * n_cells))
    n_out = max(1, round(cfg.outlier_rate * n_cells))
    n_inact = max(1, round(cfg.inactive_rate * n_cells))
    clean_mean = float(observed.mean())
    clean_sd = float(observed.std())
    outlier_value = min(clean_mean + 8.0 * max(clean_sd, 0.1), 19.5)

    # keep clean points out of the 3-sigma tail of the contaminated sample
    vals = np.concatenate([observed.ravel(), np.full(n_out, outlier_value)])
    mu, sd = vals.mean(), vals.std()
    if np.any(np.abs(observed - mu) > SIGMA_THRESHOLD * sd) or not abs(outlier_value - mu) > SIGMA_THRESHOLD * sd:
        raise RuntimeError(f"{d.field_id}: injected outliers do not separate from clean points at 3 sigma")

    def row(x, y, ts, yv, moist, active):
        return {
            "field_id": d.field_id,
            "farm_id": d.farm_id,
            "crop": d.crop,
            "x": x,
            "y": y,
            "timestamp": ts,
            "yield_t_ha": yv,
            "moisture_pct": moist,
            "harvester_active": active,
        }

    k = 0
    for r in range(g.rows):
        for c in range(g.cols):
            x = round(g.x_min + c * 10.0 + rng.uniform(0.5, 9.5), 3)
            y = round(g.y_max - (r + 1) * 10.0 + rng.uniform(0.5, 9.5), 3)
            ts = (base_ts + timedelta(seconds=2 * k)).isoformat()
            rows_out.append(row(x, y, ts, repr(float(np.float32(observed[r, c]))), round(rng.uniform(12, 18), 2), 1))
            k += 1

    def inside():
        return (
            round(g.x_min + rng.uniform(1.0, g.cols * 10.0 - 1.0), 3),
            round(g.y_min + rng.uniform(1.0, g.rows * 10.0 - 1.0), 3),
        )

    dirty = []
    for i in range(n_zero):
        x, y = inside()
        dirty.append(row(x, y, base_ts.isoformat(), "0.0", 15.0, 1))
    for i in range(n_out):
        x, y = inside()
        dirty.append(row(x, y, base_ts.isoformat(), repr(float(np.float32(outlier_value))), 15.0, 1))
    for i in range(n_inact):
        x, y = inside()
        dirty.append(row(x, y, base_ts.isoformat(), "0.0" if i % 2 else "4.0", 15.0, 0))
    dirty.append(row("nan", inside()[1], base_ts.isoformat(), "4.0", 15.0, 1))
    dirty.append(row(*inside(), "not-a-time", "4.0", 15.0, 1))
    dirty.append(row(*inside(), base_ts.isoformat(), "35.0", 15.0, 1))
    dirty.append(row(*inside(), base_ts.isoformat(), "4.0", 70.0, 1))
    counts = {
        "invalid_position": 1,
        "invalid_timestamp": 1,
        "invalid_yield_moisture": 1,
        "inactive_harvester": n_inact,
        "zero_yield": n_zero,
        "infeasible_yield": 1,
        "outlier_3sigma": n_out,
        "retained": n_cells,
    }
    # interleave dirty rows deterministically among the clean ones
    for j, drow in enumerate(dirty):
        pos = int(rng.integers(0, len(rows_out) + 1))
        rows_out.insert(pos, drow)
    return rows_out, counts


def generate_dataset(cfg: SynthConfig, root: PathLike) -> Dict[str, object]:
    """Write a synthetic dataset under ``root``; returns a summary dict."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    plans = _plan_fields(cfg)

    prepared = []
    for plan in plans:
        grid = plan.desc.grid
        dem = _dem_raster(grid, cfg.seed)
        soil = _soil_raster(grid, cfg.seed)
        weather = _weather(plan, cfg)
        precip = _season_precip(weather, plan.desc.season)
        latent, peak = _latent_for_field(plan, cfg, dem, soil, precip)
        prepared.append((plan, dem, soil, weather, latent, peak))

    all_latent = np.concatenate([p[4].ravel() for p in prepared])
    if cfg.noise_sd is not None:
        noise_sd = float(cfg.noise_sd)
    else:
        noise_sd = float(math.sqrt(all_latent.var() * (1.0 / cfg.target_bayes_r2 - 1.0)))

    yield_rows: List[dict] = []
    weather_rows: List[tuple] = []
    truth_rows: List[tuple] = []
    dirty: Dict[str, dict] = {}
    for plan, dem, soil, weather, latent, peak in prepared:
        fid = plan.desc.field_id
        fdir = root / fid
        (fdir / "s2").mkdir(parents=True, exist_ok=True)
        write_fgr(fdir / "dem.fgr", dem)
        write_fgr(fdir / "soil.fgr", soil)
        scenes = _scenes(plan, cfg, peak)
        for when, raster in scenes:
            write_fgr(fdir / "s2" / f"{when.isoformat()}.fgr", raster)
        (fdir / "s2" / "scenes.json").write_text(json.dumps({"dates": [w.isoformat() for w, _ in scenes]}, indent=1))
        rows, counts = _yield_rows(plan, cfg, latent, noise_sd)
        yield_rows.extend(rows)
        dirty[fid] = counts
        weather_rows.extend((fid, d.isoformat(), a, b, c, p) for d, a, b, c, p in weather)
        g = plan.desc.grid
        for r in range(g.rows):
            for c in range(g.cols):
                truth_rows.append((fid, c, r, repr(float(latent[r, c]))))

    write_yield_csv(root / "yield.csv", yield_rows)
    write_csv(root / "weather.csv", ["field_id", "date", "tmin_c", "tmax_c", "tmean_c", "precip_mm"], weather_rows)
    write_csv(root / "latent_truth.csv", ["field_id", "col", "row", "latent_yield"], truth_rows)
    (root / "fields.json").write_text(json.dumps([p.desc.to_dict() for p in plans], indent=1, sort_keys=True))
    (root / "dirty_counts.json").write_text(json.dumps(dirty, indent=1, sort_keys=True))
    summary = {
        "config": asdict(cfg),
        "noise_sd": noise_sd,
        "latent_var": float(all_latent.var()),
        "bayes_r2": float(all_latent.var() / (all_latent.var() + noise_sd**2)),
        "n_fields": len(plans),
        "n_pixels": int(all_latent.size),
    }
    (root / "synth_config.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def read_latent_truth(root: PathLike) -> Dict[str, np.ndarray]:
    """``{field_id: (rows, cols) latent array}`` from ``latent_truth.csv``."""
    import csv

    fields = {f["field_id"]: f for f in json.loads((Path(root) / "fields.json").read_text())}
    out: Dict[str, np.ndarray] = {}
    with open(Path(root) / "latent_truth.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            fid = row["field_id"]
            if fid not in out:
                grid = FieldDescriptor.from_dict(fields[fid]).grid
                out[fid] = np.full(grid.shape, np.nan)
            out[fid][int(row["row"]), int(row["col"])] = float(row["latent_yield"])
    return out
