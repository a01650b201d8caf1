"""Per-zone training, tiled prediction and close/far-range transfer.

Prediction pads each tile with the true neighbor pixels of the zone mosaic
(constant zero only at the zone boundary), which makes per-pixel outputs
independent of the tiling. Tiles are processed by a thread pool with a
fixed per-tile batching scheme, so worker count never changes any output.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation, model as model_mod, raster, sampling
from .errors import (
    ConfigError,
    DegenerateClassError,
    RegistryError,
    ShapeError,
)
from .model import Model, build_model, train_step
from .nncore import AdamState, bce_loss
from .raster import PATCH_MARGIN, RasterGrid, TileIndex

PREDICT_BATCH_CELLS = 32768  # patches per inference batch (fixed scheme)


@dataclass
class EarlyStopping:
    patience: int = 3
    min_delta: float = 1e-4


@dataclass
class TrainingRun:
    zone_id: str
    epochs: int = 25
    validation_fraction: float = 0.10
    seed: int = 0
    learning_rate: float = 1e-4
    early_stopping: Optional[EarlyStopping] = None

    def validate(self) -> None:
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(
                f"validation_fraction must be in (0, 1), "
                f"got {self.validation_fraction}"
            )
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class SamplingConfig:
    tile_pixels: int = 256
    tile_fraction: float = 0.5
    non_bu_rate: float = 0.6
    chunk_size: int = 200_000
    batch_size: int = 1024
    water_zone: bool = False


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    validation_loss: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss,
                "validation_loss": self.validation_loss}


def _stratified_split(labels: np.ndarray, fraction: float,
                      rng: np.random.Generator):
    """Disjoint (train_idx, val_idx); the split is stratified per class."""
    train_parts, val_parts = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        n_val = int(np.floor(idx.size * fraction + 0.5))
        n_val = min(n_val, idx.size - 1)  # keep at least one training sample
        val_parts.append(idx[:n_val])
        train_parts.append(idx[n_val:])
    train_idx = np.concatenate(train_parts)
    val_idx = np.concatenate(val_parts) if val_parts else \
        np.empty(0, dtype=np.int64)
    if val_idx.size == 0 and train_idx.size >= 2:
        # tiny sets: keep one held-out sample so the validation loss exists
        train_idx, val_idx = train_idx[1:], train_idx[:1]
    return np.sort(train_idx), np.sort(val_idx)


def _infer_loss(model: Model, view: np.ndarray, rows: np.ndarray,
                cols: np.ndarray, labels: np.ndarray,
                batch: int = PREDICT_BATCH_CELLS) -> float:
    """Mean BCE over a sample subset in inference mode."""
    total = 0.0
    for b0 in range(0, rows.size, batch):
        b1 = min(b0 + batch, rows.size)
        patches = raster.gather_patches(view, rows[b0:b1], cols[b0:b1])
        probs = model.forward(patches)
        loss, _ = bce_loss(labels[b0:b1].astype(np.float32), probs)
        total += loss * (b1 - b0)
    return total / rows.size


def train_zone(composite: RasterGrid, label_grid: RasterGrid,
               arch: model_mod.ArchitectureConfig, run: TrainingRun,
               cfg: SamplingConfig):
    """Two-stage sampling plus the full optimization loop for one zone.

    Returns (model, history, info) where info carries the sampling manifest
    and the selected tile windows.
    """
    run.validate()
    rescaled, valid = raster.rescale_reflectance(
        composite, arch.normalization_divisor
    )
    tiles = raster.tile_grid(composite.height, composite.width,
                             cfg.tile_pixels, valid_mask=valid)
    selected = sampling.select_training_tiles(tiles, cfg.tile_fraction,
                                              water_zone=cfg.water_zone)

    seeds = np.random.SeedSequence([run.seed, 0x7A11])
    sample_rng, split_rng, train_rng = [
        np.random.default_rng(s) for s in seeds.spawn(3)
    ]
    samples = sampling.build_sample_set(label_grid, valid, selected,
                                        cfg.non_bu_rate, sample_rng,
                                        seed=run.seed)
    if samples.built_up_count == 0 or samples.non_built_up_count == 0:
        raise DegenerateClassError(
            f"zone {run.zone_id!r}: single-class training data "
            f"({samples.built_up_count} built-up, "
            f"{samples.non_built_up_count} non-built-up)"
        )

    train_idx, val_idx = _stratified_split(samples.labels,
                                           run.validation_fraction, split_rng)
    padded = np.pad(rescaled.data, ((0, 0), (PATCH_MARGIN, PATCH_MARGIN),
                                    (PATCH_MARGIN, PATCH_MARGIN)),
                    mode="constant")
    view = raster.patch_view(padded)
    rows, cols, labels = samples.rows, samples.cols, samples.labels

    net = build_model(arch, seed=run.seed, zone_id=run.zone_id)
    state = AdamState.for_size(net.flat_trainable().size,
                               learning_rate=run.learning_rate)
    history = TrainingHistory()
    best_val = np.inf
    stall = 0
    for epoch in range(run.epochs):
        epoch_loss = 0.0
        for batch_idx in sampling.shuffle_minibatches(
            train_idx.size, cfg.chunk_size, cfg.batch_size, train_rng
        ):
            idx = train_idx[batch_idx]
            patches = raster.gather_patches(view, rows[idx], cols[idx])
            loss = train_step(net, patches, labels[idx], state, train_rng)
            epoch_loss += loss * idx.size
        history.train_loss.append(epoch_loss / train_idx.size)
        val_loss = _infer_loss(net, view, rows[val_idx], cols[val_idx],
                               labels[val_idx])
        history.validation_loss.append(val_loss)
        net.epochs_trained = epoch + 1

        if run.early_stopping is not None:
            if val_loss < best_val - run.early_stopping.min_delta:
                best_val = val_loss
                stall = 0
            else:
                stall += 1
                if stall >= run.early_stopping.patience:
                    break

    info = {
        "sampling": sampling.sample_manifest(samples),
        "tiles_total": len(tiles),
        "tiles_selected": [(t.tile_row, t.tile_col) for t in selected],
        "train_samples": int(train_idx.size),
        "validation_samples": int(val_idx.size),
    }
    return net, history, info


# -- prediction -------------------------------------------------------------


def _predict_padded(net: Model, padded_window: np.ndarray) -> np.ndarray:
    """Probabilities for every center of a margin-2 padded (bands, H+4, W+4)
    window, using a fixed row-block batching scheme."""
    bands, hp, wp = padded_window.shape
    h, w = hp - 2 * PATCH_MARGIN, wp - 2 * PATCH_MARGIN
    view = raster.patch_view(padded_window)
    out = np.empty((h, w), dtype=np.float32)
    rows_per = max(1, PREDICT_BATCH_CELLS // max(w, 1))
    for r0 in range(0, h, rows_per):
        r1 = min(r0 + rows_per, h)
        block = view[r0:r1].reshape(-1, *view.shape[2:])
        probs = net.forward(np.ascontiguousarray(block, dtype=np.float32))
        out[r0:r1] = probs.reshape(r1 - r0, w)
    return out


def predict_tile(net: Model, tile: RasterGrid,
                 valid: Optional[np.ndarray] = None):
    """Probability grid plus validity mask for one standalone rescaled tile.

    The tile is padded with constant zero; output dims equal tile dims.
    """
    if tile.bands != net.arch.bands:
        raise ConfigError(
            f"tile has {tile.bands} bands, model expects {net.arch.bands}"
        )
    if valid is None:
        valid = tile.valid_mask()
    padded = np.pad(tile.data.astype(np.float32, copy=False),
                    ((0, 0), (PATCH_MARGIN, PATCH_MARGIN),
                     (PATCH_MARGIN, PATCH_MARGIN)), mode="constant")
    prob = _predict_padded(net, padded)
    prob[~valid] = -1.0
    return prob, valid


@dataclass
class TilePrediction:
    tile: TileIndex
    prob: Optional[np.ndarray]  # (rows, cols) f32, -1 where invalid
    valid: Optional[np.ndarray]
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def predict_zone(net: Model, composite: RasterGrid, tile_pixels: int,
                 workers: int = 1):
    """Per-tile probabilities for a whole zone composite (raw i16 input).

    Padding windows come from the zone mosaic, so outputs do not depend on
    tile_pixels. Tile failures are isolated: each failed tile reports its
    error while the others still produce output.
    """
    if composite.bands != net.arch.bands:
        raise ConfigError(
            f"composite has {composite.bands} bands, model expects "
            f"{net.arch.bands}"
        )
    rescaled, valid = raster.rescale_reflectance(
        composite, net.arch.normalization_divisor
    )
    tiles = raster.tile_grid(composite.height, composite.width, tile_pixels,
                             valid_mask=valid)
    padded = np.pad(rescaled.data, ((0, 0), (PATCH_MARGIN, PATCH_MARGIN),
                                    (PATCH_MARGIN, PATCH_MARGIN)),
                    mode="constant")

    def run_tile(tile: TileIndex) -> TilePrediction:
        try:
            window = padded[:, tile.row0:tile.row0 + tile.rows + 2 * PATCH_MARGIN,
                            tile.col0:tile.col0 + tile.cols + 2 * PATCH_MARGIN]
            prob = _predict_padded(net, window)
            tile_valid = valid[tile.row0:tile.row0 + tile.rows,
                               tile.col0:tile.col0 + tile.cols]
            prob[~tile_valid] = -1.0
            return TilePrediction(tile=tile, prob=prob, valid=tile_valid)
        except Exception as exc:  # noqa: BLE001 - per-tile isolation
            return TilePrediction(tile=tile, prob=None, valid=None,
                                  error=f"{type(exc).__name__}: {exc}")

    if workers <= 1:
        return [run_tile(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_tile, tiles))


def mosaic_predictions(predictions, height: int, width: int):
    """Assemble per-tile outputs into one zone grid plus validity mask."""
    prob = np.full((height, width), -1.0, dtype=np.float32)
    valid = np.zeros((height, width), dtype=bool)
    for pred in predictions:
        if not pred.ok:
            continue
        t = pred.tile
        prob[t.row0:t.row0 + t.rows, t.col0:t.col0 + t.cols] = pred.prob
        valid[t.row0:t.row0 + t.rows, t.col0:t.col0 + t.cols] = pred.valid
    return prob, valid


# -- transfer ---------------------------------------------------------------

CLOSE_RANGE = "close_range"
FAR_RANGE = "far_range"


class ZoneRegistry:
    """zone_id -> {model_path, mode, source_zone_id}, persisted as JSON."""

    def __init__(self, entries: Optional[dict] = None):
        self.entries = entries or {}

    @classmethod
    def load(cls, path) -> "ZoneRegistry":
        p = Path(path)
        if not p.exists():
            return cls()
        with open(p, "r", encoding="utf-8") as f:
            return cls(json.load(f))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.entries, f, indent=2, sort_keys=True)

    def record(self, zone_id: str, model_path: str, mode: str,
               source_zone_id: str) -> None:
        if mode == FAR_RANGE and source_zone_id == zone_id:
            raise RegistryError(
                f"far-range entry for {zone_id!r} must name a different "
                f"source zone"
            )
        self.entries[zone_id] = {
            "model_path": str(model_path),
            "mode": mode,
            "source_zone_id": source_zone_id,
        }

    def model_path(self, zone_id: str) -> str:
        if zone_id not in self.entries:
            raise RegistryError(f"no trained model registered for {zone_id!r}")
        return self.entries[zone_id]["model_path"]


def run_transfer(registry: ZoneRegistry, source_zone: str, target_zone: str,
                 target_composite: RasterGrid, tile_pixels: int,
                 workers: int = 1):
    """Predict a target zone with a source zone's model and record the
    transfer mode (close range when source == target)."""
    path = registry.model_path(source_zone)
    net = model_mod.load_model(path)
    predictions = predict_zone(net, target_composite, tile_pixels,
                               workers=workers)
    mode = CLOSE_RANGE if source_zone == target_zone else FAR_RANGE
    registry.record(target_zone, path, mode, source_zone)
    return predictions, mode


def compare_transfer(close_prob: np.ndarray, far_prob: np.ndarray,
                     reference: np.ndarray, valid: np.ndarray,
                     thresholds=evaluation.DEFAULT_THRESHOLDS) -> dict:
    """Side-by-side OA/BA (plus kappa) per threshold for both modes."""
    for name, grid in (("close", close_prob), ("far", far_prob)):
        if grid.shape != reference.shape:
            raise ShapeError(
                f"{name} predictions {grid.shape} do not cover the "
                f"reference {reference.shape}"
            )
    report = {"thresholds": [float(t) for t in thresholds], "modes": {}}
    for mode, prob in ((CLOSE_RANGE, close_prob), (FAR_RANGE, far_prob)):
        rows = {}
        for t in thresholds:
            counts = evaluation.confusion(
                evaluation.binarize(prob, t), reference, valid, threshold=t
            )
            metrics = evaluation.accuracy_metrics(counts)
            rows[f"{t:g}"] = {
                "overall_accuracy": metrics["oa"],
                "balanced_accuracy": metrics["balanced_accuracy"],
                "kappa": metrics["kappa"],
            }
        report["modes"][mode] = rows
    return report
