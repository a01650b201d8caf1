"""Deterministic synthetic scenes: clustered rectangular buildings on a
noisy multi-band background, with co-registered labels and footprints.

Buildings are pixel-aligned axis-parallel rectangles, so the label raster
and the footprint rectangles (in metres) describe exactly the same mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .raster import RasterGrid, make_grid, write_raster

COMPOSITE_NODATA = -32768
LABEL_NODATA = 255
PLACEMENT_RETRIES = 200


@dataclass(frozen=True)
class SceneParams:
    size: int = 512  # zone edge, pixels
    tile_size: int = 256
    clusters: int = 26
    buildings_per_cluster: int = 14
    building_size: tuple = (5, 11)  # min/max rectangle edge, pixels
    cluster_spread: float = 14.0  # pixel sigma of building centers
    band_background: tuple = (1600.0, 1800.0, 2000.0, 2800.0)
    band_built_offset: tuple = (2400.0, 2200.0, 2000.0, -1200.0)
    noise_sigma: float = 200.0
    nodata_fraction: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.size < 16:
            raise GenerationError(f"zone size {self.size} too small")
        if self.building_size[0] < 1 or self.building_size[1] < self.building_size[0]:
            raise GenerationError(f"bad building size range {self.building_size}")
        if self.size <= 2 * self.building_size[1]:
            raise GenerationError(
                f"zone size {self.size} too small for buildings up to "
                f"{self.building_size[1]} pixels"
            )
        if len(self.band_background) != 4 or len(self.band_built_offset) != 4:
            raise GenerationError("band profiles must cover 4 bands")
        if not 0.0 <= self.nodata_fraction < 1.0:
            raise GenerationError(
                f"nodata_fraction must be in [0, 1), got {self.nodata_fraction}"
            )


@dataclass
class Zone:
    zone_id: str
    composite: RasterGrid  # i16, 4 bands
    labels: RasterGrid  # u8 {0,1}, nodata 255 unused
    footprints: list  # [(x0, y0, x1, y1), ...] metres
    params: SceneParams = None


def _place_buildings(params: SceneParams, rng: np.random.Generator):
    """Clustered pixel-aligned rectangles [(r0, c0, r1, c1) half-open)."""
    size = params.size
    lo, hi = params.building_size
    rects = []
    for _ in range(params.clusters):
        cy, cx = rng.integers(hi, size - hi, size=2)
        for _ in range(params.buildings_per_cluster):
            ok = False
            for _ in range(PLACEMENT_RETRIES):
                h = int(rng.integers(lo, hi + 1))
                w = int(rng.integers(lo, hi + 1))
                dy, dx = rng.normal(0.0, params.cluster_spread, size=2)
                r0 = int(round(cy + dy - h / 2))
                c0 = int(round(cx + dx - w / 2))
                if 0 <= r0 and 0 <= c0 and r0 + h <= size and c0 + w <= size:
                    rects.append((r0, c0, r0 + h, c0 + w))
                    ok = True
                    break
            if not ok:
                raise GenerationError(
                    f"could not place building after {PLACEMENT_RETRIES} retries"
                )
    return rects


def synth_zone(params: SceneParams, zone_id: str = "A") -> Zone:
    params.validate()
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0x5CE2E]))
    size = params.size
    rects = _place_buildings(params, rng)

    mask = np.zeros((size, size), dtype=bool)
    for r0, c0, r1, c1 in rects:
        mask[r0:r1, c0:c1] = True

    bands = np.empty((4, size, size), dtype=np.float64)
    for b in range(4):
        bands[b] = params.band_background[b]
        bands[b][mask] += params.band_built_offset[b]
    bands += rng.normal(0.0, params.noise_sigma, size=bands.shape)
    composite = np.clip(np.rint(bands), 0, 32767).astype(np.int16)

    if params.nodata_fraction > 0:
        holes = rng.random((size, size)) < params.nodata_fraction
        composite[:, holes] = COMPOSITE_NODATA

    pixel = 10.0
    comp_grid = make_grid(composite, "i16", COMPOSITE_NODATA, zone_id=zone_id,
                          pixel_size=pixel)
    label_grid = make_grid(mask.astype(np.uint8), "u8", LABEL_NODATA,
                           zone_id=zone_id, pixel_size=pixel)
    footprints = [(c0 * pixel, r0 * pixel, c1 * pixel, r1 * pixel)
                  for r0, c0, r1, c1 in rects]
    return Zone(zone_id=zone_id, composite=comp_grid, labels=label_grid,
                footprints=footprints, params=params)


def synth_twin_zones(params: SceneParams, seed_a: int, seed_b: int,
                     zone_ids=("A", "B")):
    """Two independent draws from the same generative process."""
    from dataclasses import replace
    zone_a = synth_zone(replace(params, seed=seed_a), zone_id=zone_ids[0])
    zone_b = synth_zone(replace(params, seed=seed_b), zone_id=zone_ids[1])
    return zone_a, zone_b


def zone_stats(zone: Zone) -> dict:
    labels = zone.labels.data[0]
    n = labels.size
    built = int((labels == 1).sum())
    return {
        "zone_id": zone.zone_id,
        "pixels": n,
        "built_up_pixels": built,
        "built_up_fraction": built / n,
        "buildings": len(zone.footprints),
        "nodata_pixels": int((~zone.composite.valid_mask()).sum()),
    }


def save_zone(zone: Zone, out_dir) -> dict:
    """Write composite.ghsr, labels.ghsr and footprints.json; returns paths."""
    from pathlib import Path

    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "composite": d / "composite.ghsr",
        "labels": d / "labels.ghsr",
        "footprints": d / "footprints.json",
    }
    write_raster(zone.composite, paths["composite"])
    write_raster(zone.labels, paths["labels"])
    with open(paths["footprints"], "w", encoding="utf-8") as f:
        json.dump({
            "aoi_id": zone.zone_id,
            "pixel_size": zone.composite.pixel_size,
            "origin_x": zone.composite.origin_x,
            "origin_y": zone.composite.origin_y,
            "rects": [list(r) for r in zone.footprints],
        }, f, indent=2, sort_keys=True)
    return {k: str(v) for k, v in paths.items()}


def load_footprints(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
