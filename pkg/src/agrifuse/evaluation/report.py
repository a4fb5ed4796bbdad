"""Per-field visual report: six panels plus qualitative-guideline statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from scipy.stats import wasserstein_distance

from ..grid import FieldDescriptor, Raster
from ..io import PathLike

PANELS = (
    "target_map",
    "prediction_map",
    "scatter",
    "relative_error_clipped",
    "relative_error_full",
    "distribution",
)
PANEL_FILES = {
    "target_map": "target.ppm",
    "prediction_map": "prediction.ppm",
    "scatter": "scatter.svg",
    "relative_error_clipped": "relative_error_clipped.ppm",
    "relative_error_full": "relative_error_full.ppm",
    "distribution": "distribution.svg",
}
NODATA_RGB = (96, 96, 96)


@dataclass
class ReportBundle:
    field_id: str
    panels: Dict[str, object]
    stats: Dict[str, float]
    files: Dict[str, str] = field(default_factory=dict)


def field_report(field_desc: FieldDescriptor, target: Raster, prediction: Raster) -> ReportBundle:
    """Compute the six panels and the guideline statistics for one field.

    Relative error is ``|prediction - target| / target``; the clipped panel
    caps it at 1.0 (100 %), the full-range panel does not.
    """
    if target.grid != prediction.grid:
        raise ValueError(f"{field_desc.field_id}: target and prediction grids differ")
    t = target.values[0].astype(np.float64)
    p = prediction.values[0].astype(np.float64)
    valid = ~target.nodata_mask[0] & ~prediction.nodata_mask[0]
    if not valid.any():
        raise ValueError(f"{field_desc.field_id}: no pixel is valid in both target and prediction")
    rel = np.full(t.shape, np.nan)
    rel[valid] = np.abs(p[valid] - t[valid]) / t[valid]
    tv, pv = t[valid], p[valid]
    panels: Dict[str, object] = {
        "target_map": np.where(valid, t, np.nan),
        "prediction_map": np.where(valid, p, np.nan),
        "scatter": np.stack([tv, pv], axis=1),
        "relative_error_clipped": np.minimum(rel, 1.0),
        "relative_error_full": rel,
        "distribution": {"target": tv, "prediction": pv},
    }
    stats = {
        "n_pixels": int(valid.sum()),
        "target_std": float(tv.std()),
        "prediction_std": float(pv.std()),
        "variability_ratio": float(pv.std() / tv.std()) if tv.std() > 0 else float("nan"),
        "median_abs_relative_error": float(np.median(rel[valid])),
        "distribution_distance": float(wasserstein_distance(tv, pv)),
        "field_mean_target": float(tv.mean()),
        "field_mean_prediction": float(pv.mean()),
    }
    return ReportBundle(field_desc.field_id, panels, stats)


def _rgb(values: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    from matplotlib import colormaps

    span = vmax - vmin if vmax > vmin else 1.0
    scaled = np.clip((np.nan_to_num(values, nan=vmin) - vmin) / span, 0.0, 1.0)
    rgb = (colormaps["viridis"](scaled)[..., :3] * 255).round().astype(np.uint8)
    rgb[np.isnan(values)] = NODATA_RGB
    return rgb


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    """Binary PPM (P6), 8-bit channels."""
    rows, cols, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols, 3)


def _svg(fig, path: Path) -> None:
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "agrifuse"
    fig.savefig(path, format="svg", metadata={"Date": None})


def render_report(bundle: ReportBundle, out_dir: PathLike) -> ReportBundle:
    """Write the six panels and ``report.json`` into ``out_dir``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pn = bundle.panels
    tmap, pmap = pn["target_map"], pn["prediction_map"]
    lo = float(np.nanmin([np.nanmin(tmap), np.nanmin(pmap)]))
    hi = float(np.nanmax([np.nanmax(tmap), np.nanmax(pmap)]))
    write_ppm(out / PANEL_FILES["target_map"], _rgb(tmap, lo, hi))
    write_ppm(out / PANEL_FILES["prediction_map"], _rgb(pmap, lo, hi))
    write_ppm(out / PANEL_FILES["relative_error_clipped"], _rgb(pn["relative_error_clipped"], 0.0, 1.0))
    full = pn["relative_error_full"]
    write_ppm(out / PANEL_FILES["relative_error_full"], _rgb(full, 0.0, max(float(np.nanmax(full)), 1e-12)))

    sc = pn["scatter"]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(sc[:, 0], sc[:, 1], s=4)
    ax.plot([lo, hi], [lo, hi], color="black", linewidth=0.8)
    ax.set_xlabel("target (t/ha)")
    ax.set_ylabel("prediction (t/ha)")
    _svg(fig, out / PANEL_FILES["scatter"])
    plt.close(fig)

    dist = pn["distribution"]
    fig, ax = plt.subplots(figsize=(4, 3))
    bins = np.linspace(lo, hi if hi > lo else lo + 1.0, 31)
    ax.hist(dist["target"], bins=bins, alpha=0.5, label="target")
    ax.hist(dist["prediction"], bins=bins, alpha=0.5, label="prediction")
    ax.set_xlabel("yield (t/ha)")
    ax.legend()
    _svg(fig, out / PANEL_FILES["distribution"])
    plt.close(fig)

    bundle.files = {k: str(out / v) for k, v in PANEL_FILES.items()}
    (out / "report.json").write_text(
        json.dumps({"field_id": bundle.field_id, "stats": bundle.stats, "panels": PANEL_FILES}, indent=2, sort_keys=True)
    )
    return bundle
