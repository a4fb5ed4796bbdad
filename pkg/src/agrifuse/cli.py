"""Command-line entry point: ``agrifuse <subcommand> ...``.

Every subcommand reads an optional JSON run configuration (``--config``);
explicit flags override it. Failures print one line,
``error: <module>: <message>``, and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .evaluation import METRIC_COLUMNS, evaluate_cv, field_report, make_folds, render_report
from .fusion import ABLATION_SETS, ModalitySelection
from .grid import Raster
from .io import read_fgr, write_fgr
from .pipeline import RunConfig, Workspace, composite_field, ingest, load_cubes, load_fields
from .synth import SynthConfig, generate_dataset

log = logging.getLogger("agrifuse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, type=Path, help="dataset directory (fields.json, yield.csv, ...)")
    p.add_argument("--work", required=True, type=Path, help="directory for stage outputs")
    p.add_argument("--config", type=Path, help="JSON run configuration")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="agrifuse", description="Early-fusion sub-field yield prediction pipeline.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, help="JSON synthetic-data configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-farms", type=int)
    p.add_argument("--fields-per-farm", type=int)
    p.add_argument("--field-size", type=int, help="cells per side")
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--cloud-prob", type=float)

    p = sub.add_parser("ingest", help="clean yield points and rasterize targets")
    _add_common(p)

    p = sub.add_parser("composite", help="monthly S2 composites per field")
    _add_common(p)

    p = sub.add_parser("fuse", help="assemble per-field feature cubes")
    _add_common(p)
    p.add_argument("--modalities", help="comma list, e.g. s2,weather,soil,dem")

    for name, text in (("cv", "cross-validated training and scoring"), ("ablate", "cv over the five modality sets")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--model", choices=("gbdt", "lstm"))
        p.add_argument("--k", type=int)
        p.add_argument("--seed", type=int)
        if name == "cv":
            p.add_argument("--modalities")

    p = sub.add_parser("report", help="six-panel report for one field from stored cv predictions")
    _add_common(p)
    p.add_argument("--field-id", required=True)
    p.add_argument("--model", choices=("gbdt", "lstm"))
    p.add_argument("--modalities")
    return ap


def load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    overrides = {k: getattr(args, k) for k in ("model", "k", "seed", "modalities") if getattr(args, k, None) is not None}
    cfg = replace(cfg, **overrides)
    cfg.selection  # validate early
    if cfg.k < 3:
        # one test fold, one early-stopping fold and at least one training fold
        raise ValueError(f"k must be >= 3, got {cfg.k}")
    return cfg


def config_hash(cfg: RunConfig) -> str:
    text = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_metadata(cfg: RunConfig, command: str, **extra) -> dict:
    import scipy
    import sklearn

    meta = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "decisions": {
            "cell_aggregate": cfg.cell_aggregate,
            "weather_mode": cfg.weather_mode,
            "min_scene_score": cfg.min_scene_score,
            "bn_before_relu": cfg.lstm.bn_before_relu,
            "early_stopping_split": "lowest_index_training_fold",
            "field_aggregation": "mean_of_valid_pixels",
            "static_nodata_fill": 0.0,
        },
        "versions": {
            "agrifuse": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
        },
    }
    meta.update(extra)
    return meta


def _write_meta(path: Path, meta: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True))


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    for flag, key in (
        ("seed", "seed"),
        ("n_farms", "n_farms"),
        ("fields_per_farm", "fields_per_farm"),
        ("noise_sd", "noise_sd"),
        ("cloud_prob", "cloud_prob"),
    ):
        if getattr(args, flag) is not None:
            d[key] = getattr(args, flag)
    if args.field_size is not None:
        d["field_cols"] = d["field_rows"] = args.field_size
    summary = generate_dataset(SynthConfig.from_dict(d), args.out)
    print(json.dumps({k: summary[k] for k in ("n_fields", "n_pixels", "noise_sd", "bayes_r2")}, sort_keys=True))
    return 0


def cmd_ingest(args) -> int:
    cfg = load_config(args)
    fields = load_fields(args.data)
    reports = ingest(args.data, Workspace(args.work), fields, cfg)
    total = {}
    for r in reports.values():
        for k, v in r.to_dict().items():
            total[k] = total.get(k, 0) + v
    _write_meta(args.work / "ingest" / "run_metadata.json", run_metadata(cfg, "ingest", clean_totals=total))
    print(json.dumps(total, sort_keys=True))
    return 0


def cmd_composite(args) -> int:
    cfg = load_config(args)
    ws = Workspace(args.work)
    failed = {}
    fields = load_fields(args.data)
    for fd in fields:
        try:
            composite_field(args.data, ws, fd, cfg)
        except ValueError as exc:
            failed[fd.field_id] = str(exc)
            log.warning("field %s: %s", fd.field_id, exc)
    _write_meta(ws.root / "composite" / "run_metadata.json", run_metadata(cfg, "composite", failed_fields=failed))
    print(json.dumps({"composited": len(fields) - len(failed), "failed": len(failed)}))
    return 0 if len(failed) < len(fields) else 1


def _cubes(args, cfg: RunConfig, sel: ModalitySelection):
    ws = Workspace(args.work)
    fields = load_fields(args.data)
    if not ws.target(fields[0].field_id).exists():
        ingest(args.data, ws, fields, cfg)
    cubes, failed = load_cubes(args.data, ws, fields, cfg, sel)
    if not cubes:
        raise ValueError("no field produced a usable cube")
    return ws, fields, cubes, failed


def cmd_fuse(args) -> int:
    cfg = load_config(args)
    sel = cfg.selection
    ws, _, cubes, failed = _cubes(args, cfg, sel)
    _write_meta(
        ws.root / "fuse" / sel.tag / "run_metadata.json",
        run_metadata(cfg, "fuse", modalities=sel.tag, n_features=sel.n_features, failed_fields=failed),
    )
    print(json.dumps({"modalities": sel.tag, "n_features": sel.n_features, "fields": len(cubes), "failed": len(failed)}))
    return 0


def _params(cfg: RunConfig):
    return cfg.gbdt if cfg.model == "gbdt" else cfg.lstm


def run_cv(args, cfg: RunConfig, sel: ModalitySelection):
    ws, fields, cubes, failed = _cubes(args, cfg, sel)
    kept = {c.field_id for c in cubes}
    folds = make_folds([f for f in fields if f.field_id in kept], cfg.k, cfg.seed)
    meta = run_metadata(cfg, "cv", modalities=sel.tag, crop=sorted({f.crop for f in fields}), failed_fields=failed)
    table, preds = evaluate_cv(cubes, folds, cfg.model, _params(cfg), cfg.seed, metadata={"modalities": sel.tag})

    out = ws.cv_dir(cfg.model, sel.tag)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(table.to_csv())
    (out / "metrics.json").write_text(table.to_json())
    (out / "folds.json").write_text(json.dumps(folds.to_dict(), indent=1, sort_keys=True))
    by_id = {c.field_id: c for c in cubes}
    grids = {f.field_id: f.grid for f in fields}
    for fid, p in preds.items():
        write_fgr(out / "predictions" / f"{fid}.fgr", _prediction_raster(by_id[fid], grids[fid], p))
    _write_meta(out / "run_metadata.json", meta)
    return table


def _prediction_raster(cube, grid, pred) -> Raster:
    arr = np.full(grid.shape, np.nan, dtype=np.float32)
    cols, rows = np.asarray(cube.pixel_coords).T
    arr[rows, cols] = pred
    return Raster(grid, ("prediction",), arr[None])


def cmd_cv(args) -> int:
    cfg = load_config(args)
    table = run_cv(args, cfg, cfg.selection)
    sys.stdout.write(table.to_csv())
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    lines = ["modalities," + ",".join(METRIC_COLUMNS)]
    rows = []
    for sel in ABLATION_SETS:
        mean = run_cv(args, replace(cfg, modalities=",".join(sel.names)), sel).mean
        rows.append({"modalities": sel.tag, **mean})
        lines.append(sel.tag + "," + ",".join(repr(mean[c]) for c in METRIC_COLUMNS))
    out = Path(args.work) / "ablate" / cfg.model
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    _write_meta(out / "run_metadata.json", run_metadata(cfg, "ablate", rows=rows))
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args)
    sel = cfg.selection
    ws = Workspace(args.work)
    fields = {f.field_id: f for f in load_fields(args.data)}
    if args.field_id not in fields:
        raise KeyError(f"unknown field id {args.field_id!r}")
    fd = fields[args.field_id]
    cv_dir = ws.cv_dir(cfg.model, sel.tag)
    pred_path = cv_dir / "predictions" / f"{fd.field_id}.fgr"
    if not pred_path.exists():
        raise FileNotFoundError(f"no stored prediction at {pred_path}; run cv first")
    bundle = field_report(fd, read_fgr(ws.target(fd.field_id)), read_fgr(pred_path))
    out = ws.root / "report" / f"{cfg.model}_{sel.tag}" / fd.field_id
    render_report(bundle, out)
    print(json.dumps({"out": str(out), **bundle.stats}, sort_keys=True))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "composite": cmd_composite,
    "fuse": cmd_fuse,
    "cv": cmd_cv,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _origin_module(exc: BaseException) -> str:
    """Innermost package module in the traceback, e.g. ``yield_ingest``."""
    name = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("agrifuse."):
            name = mod[len("agrifuse.") :]
    return name


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: cli: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - surfaced as a single line
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {_origin_module(exc)}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
