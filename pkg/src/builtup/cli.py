"""Command-line entry point: synth | train | predict | transfer | evaluate
| inspect.

Every executed command writes a JSON run manifest next to its primary
output (flags echoed, seeds, input/output hashes, timings, per-tile
statuses, metric summaries). Exit codes:

    0  success                  6  shape error
    1  unexpected error         7  numeric error
    2  usage error              8  degenerate class/batch
    3  missing input            9  registry error
    4  format error            10  stats/metric error
    5  config error            11  generation error
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation, model as model_mod, pipeline, raster, sampling, synth
from .errors import (
    ConfigError,
    DegenerateBatchError,
    DegenerateClassError,
    FormatError,
    GenerationError,
    MetricError,
    MissingInputError,
    NumericError,
    ParameterError,
    RegistryError,
    ShapeError,
    StatsError,
    ToolkitError,
)

EXIT_CODES = {
    MissingInputError: 3,
    FormatError: 4,
    ConfigError: 5,
    ParameterError: 5,
    ShapeError: 6,
    DegenerateBatchError: 8,
    NumericError: 7,
    DegenerateClassError: 8,
    RegistryError: 9,
    StatsError: 10,
    MetricError: 10,
    GenerationError: 11,
}


def _exit_code(exc: Exception) -> int:
    for klass in type(exc).__mro__:
        if klass in EXIT_CODES:
            return EXIT_CODES[klass]
    return 1


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_paths(paths) -> dict:
    return {str(p): _sha256(p) for p in paths if Path(p).is_file()}


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} not found: {p}")
    return p


class Manifest:
    """Accumulates the reproducibility record for one command."""

    def __init__(self, command: str, argv, config: dict):
        self.data = {
            "command": command,
            "argv": list(argv),
            "config": config,
            "inputs": {},
            "outputs": {},
            "timings_s": {},
            "status": "running",
            "error": None,
        }
        self._t0 = time.perf_counter()

    def time(self, stage: str, start: float) -> None:
        self.data["timings_s"][stage] = round(time.perf_counter() - start, 4)

    def finish(self, error: Exception = None) -> None:
        self.data["timings_s"]["total"] = round(
            time.perf_counter() - self._t0, 4
        )
        if error is None:
            self.data["status"] = "ok"
        else:
            self.data["status"] = "error"
            self.data["error"] = {
                "class": getattr(error, "error_class", "error"),
                "message": str(error),
            }

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)


def _zone_names(n: int):
    names = []
    for i in range(n):
        name = ""
        k = i
        while True:
            name = chr(ord("A") + k % 26) + name
            k = k // 26 - 1
            if k < 0:
                break
        names.append(name)
    return names


# -- commands ----------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    out = Path(args.out)
    manifest = Manifest("synth", argv, vars(args))
    error = None
    try:
        params = synth.SceneParams(size=args.size, tile_size=args.tile_size,
                                   clusters=args.clusters,
                                   noise_sigma=args.noise_sigma,
                                   nodata_fraction=args.nodata_fraction,
                                   seed=args.seed)
        zones = {}
        for i, zone_id in enumerate(_zone_names(args.zones)):
            t0 = time.perf_counter()
            zone = synth.synth_zone(replace(params, seed=args.seed + i),
                                    zone_id=zone_id)
            paths = synth.save_zone(zone, out / zone_id)
            manifest.time(f"zone_{zone_id}", t0)
            zones[zone_id] = {"paths": paths, "stats": synth.zone_stats(zone)}
        manifest.data["zones"] = zones
        manifest.data["outputs"] = _hash_paths(
            p for z in zones.values() for p in z["paths"].values()
        )
    except Exception as exc:
        error = exc
    manifest.finish(error)
    manifest.write(out / "synth_manifest.json")
    if error is not None:
        raise error
    return 0


def _arch_from_args(args) -> model_mod.ArchitectureConfig:
    return model_mod.preset(args.preset, divisor=args.divisor)


def cmd_train(args, argv) -> int:
    out = Path(args.out)
    manifest = Manifest("train", argv, vars(args))
    error = None
    try:
        zone_dir = _require(Path(args.data) / args.zone, "zone directory")
        comp_path = _require(zone_dir / "composite.ghsr", "composite raster")
        label_path = _require(zone_dir / "labels.ghsr", "label raster")
        manifest.data["inputs"] = _hash_paths([comp_path, label_path])

        composite = raster.read_raster(comp_path)
        labels = raster.read_raster(label_path)
        arch = _arch_from_args(args)
        early = None
        if args.early_stop_patience is not None:
            early = pipeline.EarlyStopping(patience=args.early_stop_patience,
                                           min_delta=args.early_stop_min_delta)
        run = pipeline.TrainingRun(zone_id=args.zone, epochs=args.epochs,
                                   validation_fraction=args.validation_fraction,
                                   seed=args.seed,
                                   learning_rate=args.learning_rate,
                                   early_stopping=early)
        cfg = pipeline.SamplingConfig(tile_pixels=args.tile_size,
                                      tile_fraction=args.tile_fraction,
                                      non_bu_rate=args.non_bu_rate,
                                      chunk_size=args.chunk_size,
                                      batch_size=args.batch_size,
                                      water_zone=args.water_zone)
        t0 = time.perf_counter()
        net, history, info = pipeline.train_zone(composite, labels, arch,
                                                 run, cfg)
        manifest.time("train", t0)
        model_mod.save_model(net, out)
        history_path = out.with_suffix(".history.json")
        with open(history_path, "w", encoding="utf-8") as f:
            json.dump(history.to_dict(), f, indent=2)
        manifest.data["training"] = info
        manifest.data["final_train_loss"] = history.train_loss[-1]
        manifest.data["final_validation_loss"] = history.validation_loss[-1]
        manifest.data["outputs"] = _hash_paths([out, history_path])
        if args.registry:
            registry = pipeline.ZoneRegistry.load(args.registry)
            registry.record(args.zone, str(out), pipeline.CLOSE_RANGE,
                            args.zone)
            registry.save(args.registry)
    except Exception as exc:
        error = exc
    manifest.finish(error)
    manifest.write(out.parent / f"{out.stem}.train_manifest.json")
    if error is not None:
        raise error
    return 0


def _write_predictions(predictions, net, composite, out_dir: Path):
    """Per-tile probability + quantized rasters; returns tile status list."""
    statuses = []
    for pred in predictions:
        t = pred.tile
        entry = {
            "tile_row": t.tile_row, "tile_col": t.tile_col,
            "row0": t.row0, "col0": t.col0, "rows": t.rows, "cols": t.cols,
        }
        if pred.ok:
            stem = f"tile_{t.tile_row:03d}_{t.tile_col:03d}"
            prob_grid = raster.RasterGrid(
                width=t.cols, height=t.rows, bands=1, dtype="f32",
                nodata=-1.0, zone_id=composite.zone_id,
                origin_x=composite.origin_x + t.col0 * composite.pixel_size,
                origin_y=composite.origin_y + t.row0 * composite.pixel_size,
                pixel_size=composite.pixel_size, data=pred.prob[None])
            quant = raster.quantize_probability(
                np.where(pred.valid, pred.prob, 0.0), pred.valid
            )
            quant_grid = replace_data(prob_grid, quant[None], "u8", 255.0)
            prob_path = out_dir / f"{stem}_prob.ghsr"
            quant_path = out_dir / f"{stem}_quant.ghsr"
            raster.write_raster(prob_grid, prob_path)
            raster.write_raster(quant_grid, quant_path)
            entry.update(status="ok", prob=str(prob_path),
                         quant=str(quant_path))
        else:
            entry.update(status="error", error=pred.error)
        statuses.append(entry)
    return statuses


def replace_data(grid: raster.RasterGrid, data, dtype: str,
                 nodata: float) -> raster.RasterGrid:
    return raster.RasterGrid(width=grid.width, height=grid.height,
                             bands=data.shape[0], dtype=dtype, nodata=nodata,
                             zone_id=grid.zone_id, origin_x=grid.origin_x,
                             origin_y=grid.origin_y,
                             pixel_size=grid.pixel_size, data=data)


def _predict_common(args, argv, command: str) -> int:
    out_dir = Path(args.out)
    manifest = Manifest(command, argv, vars(args))
    error = None
    try:
        zone_dir = _require(Path(args.data) / args.zone, "zone directory")
        comp_path = _require(zone_dir / "composite.ghsr", "composite raster")
        inputs = [comp_path]

        if command == "transfer":
            registry = pipeline.ZoneRegistry.load(
                _require(args.registry, "registry")
            )
            composite = raster.read_raster(comp_path)
            t0 = time.perf_counter()
            predictions, mode = pipeline.run_transfer(
                registry, args.source_zone, args.zone, composite,
                args.tile_size, workers=args.workers
            )
            manifest.time("predict", t0)
            registry.save(args.registry)
            manifest.data["transfer"] = {
                "mode": mode,
                "source_zone": args.source_zone,
                "target_zone": args.zone,
            }
            net = model_mod.load_model(registry.model_path(args.zone))
            inputs.append(registry.model_path(args.zone))
        else:
            model_path = _require(args.model, "model file")
            inputs.append(model_path)
            net = model_mod.load_model(model_path)
            composite = raster.read_raster(comp_path)
            t0 = time.perf_counter()
            predictions = pipeline.predict_zone(net, composite,
                                                args.tile_size,
                                                workers=args.workers)
            manifest.time("predict", t0)

        manifest.data["inputs"] = _hash_paths(inputs)
        out_dir.mkdir(parents=True, exist_ok=True)
        statuses = _write_predictions(predictions, net, composite, out_dir)
        manifest.data["tiles"] = statuses
        manifest.data["outputs"] = _hash_paths(
            [s["prob"] for s in statuses if s["status"] == "ok"]
            + [s["quant"] for s in statuses if s["status"] == "ok"]
        )
        failed = [s for s in statuses if s["status"] != "ok"]
        manifest.data["tiles_failed"] = len(failed)
    except Exception as exc:
        error = exc
    manifest.finish(error)
    manifest.write(out_dir / f"{command}_manifest.json")
    if error is not None:
        raise error
    return 0


def cmd_predict(args, argv) -> int:
    return _predict_common(args, argv, "predict")


def cmd_transfer(args, argv) -> int:
    return _predict_common(args, argv, "transfer")


def _load_prediction_mosaic(probs_dir: Path):
    """Rebuild the zone probability grid from a prediction manifest."""
    manifest_path = None
    for name in ("predict_manifest.json", "transfer_manifest.json"):
        if (probs_dir / name).exists():
            manifest_path = probs_dir / name
            break
    if manifest_path is None:
        raise MissingInputError(
            f"no prediction manifest found under {probs_dir}"
        )
    with open(manifest_path, "r", encoding="utf-8") as f:
        info = json.load(f)
    tiles = info["tiles"]
    height = max(t["row0"] + t["rows"] for t in tiles)
    width = max(t["col0"] + t["cols"] for t in tiles)
    prob = np.full((height, width), -1.0, dtype=np.float32)
    valid = np.zeros((height, width), dtype=bool)
    pixel_size = None
    for t in tiles:
        if t["status"] != "ok":
            continue
        grid = raster.read_raster(t["prob"])
        pixel_size = grid.pixel_size
        window = grid.data[0]
        sl = (slice(t["row0"], t["row0"] + t["rows"]),
              slice(t["col0"], t["col0"] + t["cols"]))
        prob[sl] = window
        valid[sl] = window != grid.nodata
    return prob, valid, pixel_size


def cmd_evaluate(args, argv) -> int:
    report_path = Path(args.report)
    manifest = Manifest("evaluate", argv, vars(args))
    error = None
    try:
        probs_dir = _require(args.probs, "prediction directory")
        ref_dir = _require(args.reference, "reference directory")
        fp_path = _require(Path(ref_dir) / "footprints.json", "footprints")
        prob, valid, pixel_size = _load_prediction_mosaic(Path(probs_dir))
        footprints = synth.load_footprints(fp_path)
        thresholds = [float(t) for t in args.thresholds.split(",")]
        t0 = time.perf_counter()
        report = evaluation.evaluate_probabilities(
            prob, valid, footprints["rects"],
            width=prob.shape[1], height=prob.shape[0],
            pixel_size=pixel_size or footprints["pixel_size"],
            origin_x=footprints.get("origin_x", 0.0),
            origin_y=footprints.get("origin_y", 0.0),
            thresholds=thresholds, aoi_id=footprints.get("aoi_id", ""),
        )
        manifest.time("evaluate", t0)
        evaluation.report_to_json(report, report_path)
        outputs = [report_path]
        if args.csv:
            evaluation.report_to_csv([report], args.csv)
            outputs.append(Path(args.csv))
        manifest.data["inputs"] = _hash_paths([fp_path])
        manifest.data["outputs"] = _hash_paths(outputs)
        manifest.data["metrics"] = report
    except Exception as exc:
        error = exc
    manifest.finish(error)
    manifest.write(report_path.parent / f"{report_path.stem}.evaluate_manifest.json")
    if error is not None:
        raise error
    return 0


def cmd_inspect(args, argv) -> int:
    path = _require(args.path, "file")
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == raster.MAGIC:
        header = raster.read_header(path)
    elif magic == model_mod.GHSM_MAGIC:
        header = model_mod.read_model_header(path)
    else:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    for key in sorted(header):
        print(f"{key}: {header[key]}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="builtup",
        description="Train, apply, transfer and validate the patch "
                    "classification network on tiled multi-band rasters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic zones")
    p.add_argument("--out", required=True)
    p.add_argument("--zones", type=int, default=1)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--clusters", type=int, default=26)
    p.add_argument("--noise-sigma", type=float, default=300.0)
    p.add_argument("--nodata-fraction", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one zone model")
    p.add_argument("--zone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output .ghsm model path")
    p.add_argument("--preset", choices=sorted(model_mod.PRESETS),
                   default="desk")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--validation-fraction", type=float, default=0.10)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--tile-fraction", type=float, default=0.5)
    p.add_argument("--non-bu-rate", type=float, default=0.6)
    p.add_argument("--chunk-size", type=int, default=200_000)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--divisor", type=float, default=10000.0)
    p.add_argument("--water-zone", action="store_true")
    p.add_argument("--early-stop-patience", type=int, default=None)
    p.add_argument("--early-stop-min-delta", type=float, default=1e-4)
    p.add_argument("--registry", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict all tiles of a zone")
    p.add_argument("--zone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("transfer", help="predict a zone with another zone's "
                                        "model and record provenance")
    p.add_argument("--zone", required=True, help="target zone")
    p.add_argument("--source-zone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("evaluate", help="score predictions against reference "
                                        "footprints")
    p.add_argument("--probs", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--thresholds", default="0.2,0.5")
    p.add_argument("--report", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="print a GHSR/GHSM header")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except ToolkitError as exc:
        print(f"error[{exc.error_class}]: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except Exception as exc:  # noqa: BLE001
        print(f"error[unexpected]: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
