"""Additional data modalities: soil, terrain and weather on the field grid."""

from __future__ import annotations

from typing import Tuple

from ..grid import GeoGrid, Raster
from .resample import bicubic_upsample, keys_kernel
from .terrain import (
    TERRAIN_BANDS,
    curvature,
    d8_directions,
    fill_depressions,
    flow_accumulation,
    horn_slope_aspect,
    slope_aspect,
    terrain_features,
    twi,
)
from .weather import WEATHER_FEATURES, WeatherAggregate, WeatherDaily, WeatherGapError, aggregate_weather

SOIL_PROPERTIES = ("cec", "cfvo", "nitrogen", "phh2o", "sand", "silt", "soc", "clay")
SOIL_DEPTHS = ("0-5", "5-15", "15-30")
SOIL_BANDS: Tuple[str, ...] = tuple(f"{p}_{d}" for p in SOIL_PROPERTIES for d in SOIL_DEPTHS)


def prepare_soil(soil: Raster, grid: GeoGrid) -> Raster:
    """Upsample the 24-band soil stack onto the field grid."""
    if soil.band_names != SOIL_BANDS:
        raise ValueError(f"soil raster must carry bands {SOIL_BANDS}, got {soil.band_names}")
    return bicubic_upsample(soil, grid)


def prepare_terrain(dem: Raster, grid: GeoGrid) -> Raster:
    """Derive terrain features on the native DEM grid, then upsample."""
    return bicubic_upsample(terrain_features(dem), grid)


__all__ = [
    "SOIL_BANDS",
    "SOIL_DEPTHS",
    "SOIL_PROPERTIES",
    "TERRAIN_BANDS",
    "WEATHER_FEATURES",
    "WeatherAggregate",
    "WeatherDaily",
    "WeatherGapError",
    "aggregate_weather",
    "bicubic_upsample",
    "curvature",
    "d8_directions",
    "fill_depressions",
    "flow_accumulation",
    "keys_kernel",
    "prepare_soil",
    "prepare_terrain",
    "horn_slope_aspect",
    "slope_aspect",
    "terrain_features",
    "twi",
]
