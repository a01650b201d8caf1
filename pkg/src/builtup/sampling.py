"""Label compositing and the two-stage tile/patch training sampler.

Stage one picks a systematic subset of tiles (checkerboard parity at the
default 50% fraction). Stage two keeps every patch whose 5x5 label block
contains at least one built-up pixel and an independent Bernoulli draw of
the non-built-up patches.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ParameterError, ShapeError, StatsError
from .raster import PATCH_MARGIN, RasterGrid

LABEL_NODATA = 255


@dataclass
class LabelSource:
    raster: RasterGrid  # values in {0, 1, nodata}
    priority: int  # 1 = highest
    name: str = ""


def composite_labels(sources) -> RasterGrid:
    """Per pixel, the value of the highest-priority source that is not
    nodata; nodata only where every source is nodata."""
    if not sources:
        raise ParameterError("composite_labels needs at least one source")
    ordered = sorted(sources, key=lambda s: s.priority)
    first = ordered[0].raster
    out = np.full((first.height, first.width), LABEL_NODATA, dtype=np.uint8)
    filled = np.zeros(out.shape, dtype=bool)
    for src in ordered:
        g = src.raster
        if (g.height, g.width) != out.shape:
            raise ShapeError(
                f"label source {src.name!r} is {g.height}x{g.width}, "
                f"expected {out.shape[0]}x{out.shape[1]}"
            )
        values = g.data[0]
        usable = (values != g.nodata) & ~filled
        out[usable] = values[usable]
        filled |= usable
    return RasterGrid(width=first.width, height=first.height, bands=1,
                      dtype="u8", nodata=LABEL_NODATA, zone_id=first.zone_id,
                      origin_x=first.origin_x, origin_y=first.origin_y,
                      pixel_size=first.pixel_size, data=out[None, :, :])


def select_training_tiles(tiles, fraction: float,
                          water_zone: bool = False) -> list:
    """Systematic tile selection.

    fraction 0.5 selects the (tile_row + tile_col) parity checkerboard;
    other fractions take a systematic every-1/fraction pass in row-major
    order (the first tile is always taken). Water-dominated zones keep all
    tiles that contain valid data, ignoring the fraction.
    """
    if water_zone:
        return [t for t in tiles if not t.water_dominated]
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(tiles)
    if fraction == 0.5:
        return [t for t in tiles if (t.tile_row + t.tile_col) % 2 == 0]
    return [t for i, t in enumerate(tiles) if (i * fraction) % 1.0 < fraction]


@dataclass
class SampleSet:
    """Patch references plus labels for one zone; values live in the rasters."""

    zone_id: str
    rows: np.ndarray  # (N,) patch center rows
    cols: np.ndarray  # (N,) patch center cols
    labels: np.ndarray  # (N,) uint8, 1 = built-up patch
    seed: int
    non_bu_rate: float

    def __len__(self) -> int:
        return self.rows.size

    @property
    def built_up_count(self) -> int:
        return int(self.labels.sum())

    @property
    def non_built_up_count(self) -> int:
        return int(len(self) - self.labels.sum())


def patch_block_labels(labels: np.ndarray, nodata: float = LABEL_NODATA,
                       margin: int = PATCH_MARGIN) -> np.ndarray:
    """(H, W) bool: patch label block contains >= 1 built-up pixel.

    Blocks are clipped at the grid border; nodata label cells never count
    as built-up.
    """
    built = (labels == 1)
    padded = np.pad(built, margin, mode="constant", constant_values=False)
    win = np.lib.stride_tricks.sliding_window_view(
        padded, (2 * margin + 1, 2 * margin + 1)
    )
    return win.any(axis=(2, 3))


def build_sample_set(label_grid: RasterGrid, valid_mask: np.ndarray,
                     tiles, non_bu_rate: float, rng: np.random.Generator,
                     seed: int = 0) -> SampleSet:
    """All built-up patches from the selected tiles plus a Bernoulli
    non_bu_rate draw of the non-built-up ones.

    Candidates are patch centers inside the tile windows whose center label
    is known and whose center pixel carries valid image data.
    """
    labels = label_grid.data[0]
    block_bu = patch_block_labels(labels, nodata=label_grid.nodata)
    center_ok = (labels != label_grid.nodata) & valid_mask

    rows_out, cols_out, labels_out = [], [], []
    for tile in sorted(tiles, key=lambda t: (t.tile_row, t.tile_col)):
        sl = (slice(tile.row0, tile.row0 + tile.rows),
              slice(tile.col0, tile.col0 + tile.cols))
        ok = center_ok[sl]
        bu = block_bu[sl]
        draws = rng.random(ok.shape)
        keep = ok & (bu | (draws < non_bu_rate))
        r, c = np.nonzero(keep)
        rows_out.append(r + tile.row0)
        cols_out.append(c + tile.col0)
        labels_out.append(bu[keep].astype(np.uint8))

    rows = np.concatenate(rows_out) if rows_out else np.empty(0, dtype=np.int64)
    cols = np.concatenate(cols_out) if cols_out else np.empty(0, dtype=np.int64)
    labs = np.concatenate(labels_out) if labels_out else np.empty(0, dtype=np.uint8)
    sample_set = SampleSet(zone_id=label_grid.zone_id, rows=rows, cols=cols,
                           labels=labs, seed=seed, non_bu_rate=non_bu_rate)
    if sample_set.built_up_count == 0:
        warnings.warn(
            f"zone {label_grid.zone_id!r}: no built-up patches in the selected "
            f"tiles; training will be degenerate",
            stacklevel=2,
        )
    return sample_set


def class_stats(sample_set: SampleSet) -> dict:
    if len(sample_set) == 0:
        raise StatsError("class_stats on an empty sample set")
    n = len(sample_set)
    bu = sample_set.built_up_count
    return {"built_up": bu / n, "non_built_up": (n - bu) / n}


def sample_manifest(sample_set: SampleSet) -> dict:
    """Reproducibility record for a sampling pass."""
    stats = class_stats(sample_set) if len(sample_set) else \
        {"built_up": 0.0, "non_built_up": 0.0}
    return {
        "zone_id": sample_set.zone_id,
        "seed": sample_set.seed,
        "non_bu_rate": sample_set.non_bu_rate,
        "samples": len(sample_set),
        "built_up": sample_set.built_up_count,
        "non_built_up": sample_set.non_built_up_count,
        "fractions": stats,
    }


def shuffle_minibatches(n_samples: int, chunk_size: int, batch_size: int,
                        rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of sample indices: a full shuffle grouped into staging
    chunks, each chunk split into optimizer batches. Every index appears
    exactly once."""
    if chunk_size < batch_size:
        raise ParameterError(
            f"chunk_size {chunk_size} must be >= batch_size {batch_size}"
        )
    order = rng.permutation(n_samples)
    for c0 in range(0, n_samples, chunk_size):
        chunk = order[c0:c0 + chunk_size]
        for b0 in range(0, chunk.size, batch_size):
            yield chunk[b0:b0 + batch_size]
