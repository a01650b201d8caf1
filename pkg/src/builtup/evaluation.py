"""Accuracy assessment: density regression and confusion-based metrics.

The continuous assessment regresses reference built-up densities on the
predicted probabilities (ordinary least squares plus Pearson r). The
binary assessment thresholds the probabilities and scores overall
accuracy, balanced accuracy and Cohen's kappa against a presence/absence
reference.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import MetricError, ShapeError, UndefinedStatisticError

DEFAULT_THRESHOLDS = (0.2, 0.5)


def rasterize_density(rects, width: int, height: int, pixel_size: float = 10.0,
                      origin_x: float = 0.0, origin_y: float = 0.0,
                      fine_res: float = 1.0) -> np.ndarray:
    """Built-up density per coarse cell from rectangle footprints.

    Rectangles are (x0, y0, x1, y1) in metres; x runs along columns and y
    along rows. A fine cell counts as built when its center point lies in
    any rectangle (half-open [x0, x1) x [y0, y1)); the density of a coarse
    cell is the mean of its fine cells. Footprints outside the extent are
    clipped with a warning.
    """
    sub = int(round(pixel_size / fine_res))
    fw, fh = width * sub, height * sub
    fine = np.zeros((fh, fw), dtype=bool)
    clipped = False
    for x0, y0, x1, y1 in rects:
        # fine cell i has center (i + 0.5) * fine_res; center in [a, b)
        # iff i in [ceil(a/fine - 0.5), ceil(b/fine - 0.5) - 1]
        c0 = int(np.ceil((x0 - origin_x) / fine_res - 0.5))
        c1 = int(np.ceil((x1 - origin_x) / fine_res - 0.5))
        r0 = int(np.ceil((y0 - origin_y) / fine_res - 0.5))
        r1 = int(np.ceil((y1 - origin_y) / fine_res - 0.5))
        if c0 < 0 or r0 < 0 or c1 > fw or r1 > fh:
            clipped = True
        c0, c1 = max(c0, 0), min(c1, fw)
        r0, r1 = max(r0, 0), min(r1, fh)
        if r1 > r0 and c1 > c0:
            fine[r0:r1, c0:c1] = True
    if clipped:
        warnings.warn("footprint extends outside the extent; clipped",
                      stacklevel=2)
    return fine.reshape(height, sub, width, sub).mean(axis=(1, 3))


def regress_density(prob: np.ndarray, density: np.ndarray,
                    valid: np.ndarray) -> dict:
    """OLS of density (response) on probability (predictor) plus Pearson r."""
    if prob.shape != density.shape or prob.shape != valid.shape:
        raise ShapeError(
            f"grid shapes differ: {prob.shape}, {density.shape}, {valid.shape}"
        )
    x = prob[valid].astype(np.float64)
    y = density[valid].astype(np.float64)
    if x.size < 2:
        raise UndefinedStatisticError(f"need >= 2 valid pixels, got {x.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedStatisticError(
            "zero variance on the probability or density axis"
        )
    sxy = float(xc @ yc)
    slope = sxy / sxx
    return {
        "r": sxy / np.sqrt(sxx * syy),
        "slope": slope,
        "intercept": float(y.mean() - slope * x.mean()),
        "n": int(x.size),
    }


def binarize(prob: np.ndarray, threshold: float) -> np.ndarray:
    """Built-up iff probability >= threshold (inclusive)."""
    return np.asarray(prob) >= threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float = float("nan")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(predicted: np.ndarray, reference: np.ndarray, valid: np.ndarray,
              threshold: float = float("nan")) -> ConfusionCounts:
    if predicted.shape != reference.shape or predicted.shape != valid.shape:
        raise ShapeError(
            f"grid shapes differ: {predicted.shape}, {reference.shape}, "
            f"{valid.shape}"
        )
    p = predicted[valid].astype(bool)
    r = reference[valid].astype(bool)
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    tn = int(np.count_nonzero(~p & ~r))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn, threshold=threshold)


def accuracy_metrics(counts: ConfusionCounts) -> dict:
    """OA, balanced accuracy and Cohen's kappa (marginal-product chance)."""
    total = counts.total
    if total == 0:
        raise MetricError("no valid pixels to score")
    ref_pos = counts.tp + counts.fn
    ref_neg = counts.tn + counts.fp
    if ref_pos == 0:
        raise MetricError("reference has no built-up pixels; "
                          "sensitivity undefined")
    if ref_neg == 0:
        raise MetricError("reference has no non-built-up pixels; "
                          "specificity undefined")
    oa = (counts.tp + counts.tn) / total
    ba = 0.5 * (counts.tp / ref_pos + counts.tn / ref_neg)
    pred_pos = counts.tp + counts.fp
    pred_neg = counts.tn + counts.fn
    p_e = (ref_pos * pred_pos + ref_neg * pred_neg) / (total * total)
    if p_e == 1.0:
        raise MetricError("chance agreement is 1; kappa undefined")
    kappa = (oa - p_e) / (1.0 - p_e)
    return {"oa": oa, "balanced_accuracy": ba, "kappa": kappa}


def evaluate_probabilities(prob: np.ndarray, valid: np.ndarray, rects,
                           width: int, height: int, pixel_size: float = 10.0,
                           origin_x: float = 0.0, origin_y: float = 0.0,
                           thresholds=DEFAULT_THRESHOLDS,
                           aoi_id: str = "") -> dict:
    """Full per-AOI report: regression stats plus per-threshold metrics."""
    density = rasterize_density(rects, width=width, height=height,
                                pixel_size=pixel_size, origin_x=origin_x,
                                origin_y=origin_y)
    reference = density > 0.0
    regression = regress_density(prob, density, valid)
    per_threshold = {}
    for t in thresholds:
        counts = confusion(binarize(prob, t), reference, valid, threshold=t)
        metrics = accuracy_metrics(counts)
        per_threshold[f"{t:g}"] = {
            "threshold": t,
            "counts": {"tp": counts.tp, "fp": counts.fp,
                       "fn": counts.fn, "tn": counts.tn},
            **metrics,
        }
    return {
        "aoi_id": aoi_id,
        "regression": regression,
        "thresholds": per_threshold,
    }


def report_to_json(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)


def report_to_csv(reports, path) -> None:
    """One row per AOI: id, regression stats, then OA/BA/kappa per threshold."""
    reports = list(reports)
    thresholds = sorted(
        {t for rep in reports for t in rep["thresholds"]}, key=float
    )
    fields = ["aoi_id", "r", "slope", "intercept"]
    for t in thresholds:
        fields += [f"oa_{t}", f"ba_{t}", f"kappa_{t}"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for rep in reports:
            row = {
                "aoi_id": rep["aoi_id"],
                "r": rep["regression"]["r"],
                "slope": rep["regression"]["slope"],
                "intercept": rep["regression"]["intercept"],
            }
            for t, entry in rep["thresholds"].items():
                row[f"oa_{t}"] = entry["oa"]
                row[f"ba_{t}"] = entry["balanced_accuracy"]
                row[f"kappa_{t}"] = entry["kappa"]
            writer.writerow(row)
