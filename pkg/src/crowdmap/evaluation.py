"""Counting metrics and density-map person detection.

Counting quality is scored with MAE, MNAE, and RMSE over per-image
(true, predicted) count pairs. Detection extracts local maxima from a
predicted high-resolution density map, keeps the top ``target_count`` of
them, and scores the result against ground-truth points with a half-meter
matching criterion converted to pixels through the image's ground sampling
distance.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from .dataset import PointAnnotationSet
from .density import DensityMap

MATCH_RADIUS_M = 0.5


@dataclass
class MetricsReport:
    """Aggregate counting errors plus the per-image pairs behind them."""

    per_image: list[tuple[str, float, float]]
    mae: float
    mnae: float
    rmse: float
    mnae_excluded: int = 0


@dataclass
class PersonDetections:
    """Ranked (x, y, score) person locations from one density map."""

    points: list[tuple[float, float, float]]
    shortfall: bool = False

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)


@dataclass
class DetectionResult:
    detections: list[tuple[float, float, float]]
    matches: list[tuple[int, int, float]]
    precision: float
    recall: float
    f1: float


def counting_metrics(pairs) -> MetricsReport:
    """Compute MAE, MNAE, and RMSE over (C, C_hat) pairs.

    Items may be ``(true, predicted)`` or ``(image_id, true, predicted)``.
    Images with a true count of zero are excluded from MNAE (their
    normalized error is undefined) with a warning.
    """
    rows = []
    for i, item in enumerate(pairs):
        if len(item) == 3:
            image_id, c, c_hat = item
        else:
            c, c_hat = item
            image_id = str(i)
        rows.append((str(image_id), float(c), float(c_hat)))
    if not rows:
        raise ValueError("counting_metrics needs at least one (C, C_hat) pair")

    c = np.array([r[1] for r in rows], dtype=np.float64)
    c_hat = np.array([r[2] for r in rows], dtype=np.float64)
    err = np.abs(c - c_hat)

    nonzero = c > 0
    excluded = int((~nonzero).sum())
    if excluded:
        warnings.warn(
            f"{excluded} image(s) with zero true count excluded from MNAE",
            stacklevel=2)
    mnae = float((err[nonzero] / c[nonzero]).mean()) if nonzero.any() else float("nan")

    return MetricsReport(
        per_image=rows,
        mae=float(err.mean()),
        mnae=mnae,
        rmse=float(np.sqrt((err ** 2).mean())),
        mnae_excluded=excluded,
    )


def detect_persons(density_high: DensityMap, target_count: int,
                   min_sep_px: int) -> PersonDetections:
    """Extract the ``target_count`` strongest local maxima as person locations.

    A pixel is a candidate if it is positive and equals the maximum of its
    (2*min_sep_px+1) square neighborhood. Candidates are ranked by density
    descending, ties broken in row-major order, and reported at pixel
    centers in full-resolution coordinates. When the map holds fewer maxima
    than requested, all of them are returned and ``shortfall`` is set.
    """
    if target_count < 0:
        raise ValueError(f"target_count must be >= 0, got {target_count}")
    if min_sep_px < 1:
        raise ValueError(f"min_sep_px must be >= 1, got {min_sep_px}")
    if target_count == 0:
        return PersonDetections(points=[], shortfall=False)

    values = density_high.values
    window = 2 * int(min_sep_px) + 1
    local_max = values >= maximum_filter(values, size=window, mode="constant")
    rows, cols = np.nonzero(local_max & (values > 0))
    scores = values[rows, cols].astype(np.float64)

    order = np.lexsort((cols, rows, -scores))
    order = order[: int(target_count)]
    scale = float(density_high.resolution_divisor)
    points = [
        ((cols[i] + 0.5) * scale, (rows[i] + 0.5) * scale, float(scores[i]))
        for i in order
    ]
    return PersonDetections(points=points, shortfall=len(points) < target_count)


def match_detections(detections, gt: PointAnnotationSet, gsd: float) -> DetectionResult:
    """Score detections against ground truth with a half-meter criterion.

    Detections are visited in descending score order; each one claims its
    nearest still-unmatched ground-truth point within ``0.5 / gsd`` pixels.
    Both sides are matched at most once.
    """
    if gsd <= 0:
        raise ValueError(f"gsd must be positive, got {gsd}")
    dets = list(detections)
    radius_px = MATCH_RADIUS_M / gsd

    gt_pts = np.asarray(gt.points, dtype=np.float64).reshape(-1, 2)
    taken = np.zeros(len(gt_pts), dtype=bool)
    matches = []
    for det_idx in sorted(range(len(dets)), key=lambda i: -dets[i][2]):
        if not len(gt_pts):
            break
        x, y, _ = dets[det_idx]
        d = np.hypot(gt_pts[:, 0] - x, gt_pts[:, 1] - y)
        d[taken] = np.inf
        gt_idx = int(np.argmin(d))
        if d[gt_idx] <= radius_px:
            taken[gt_idx] = True
            matches.append((det_idx, gt_idx, float(d[gt_idx] * gsd)))

    matches.sort()
    tp = len(matches)
    precision = tp / len(dets) if dets else 0.0
    recall = tp / len(gt_pts) if len(gt_pts) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionResult(
        detections=[(float(x), float(y), float(s)) for x, y, s in dets],
        matches=matches, precision=precision, recall=recall, f1=f1)


def metrics_to_csv(report: MetricsReport, path: str | Path) -> None:
    """Per-image rows plus an aggregate footer."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "true_count", "predicted_count", "abs_error"])
        for image_id, c, c_hat in report.per_image:
            writer.writerow([image_id, f"{c:.3f}", f"{c_hat:.3f}", f"{abs(c - c_hat):.3f}"])
        writer.writerow([])
        writer.writerow(["aggregate", "mae", "mnae", "rmse"])
        writer.writerow(["", f"{report.mae:.4f}", f"{report.mnae:.4f}", f"{report.rmse:.4f}"])


def format_metrics_table(report: MetricsReport, title: str = "counting results") -> str:
    """Fixed-width table with one row per image and an aggregate footer."""
    lines = [title, f"{'image':<16}{'true':>10}{'pred':>12}{'abs err':>10}"]
    for image_id, c, c_hat in report.per_image:
        lines.append(f"{image_id:<16}{c:>10.1f}{c_hat:>12.1f}{abs(c - c_hat):>10.1f}")
    lines.append("-" * 48)
    lines.append(f"MAE {report.mae:.2f}   MNAE {report.mnae:.4f}   RMSE {report.rmse:.2f}")
    if report.mnae_excluded:
        lines.append(f"({report.mnae_excluded} zero-count image(s) excluded from MNAE)")
    return "\n".join(lines)


def detections_to_csv(result: DetectionResult, path: str | Path) -> None:
    matched = {det_idx: (gt_idx, dist) for det_idx, gt_idx, dist in result.matches}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "score", "matched_gt", "distance_m"])
        for i, (x, y, score) in enumerate(result.detections):
            gt_idx, dist = matched.get(i, ("", ""))
            dist_s = f"{dist:.4f}" if dist != "" else ""
            writer.writerow([f"{x:.2f}", f"{y:.2f}", f"{score:.6g}", gt_idx, dist_s])
        writer.writerow([])
        writer.writerow(["precision", f"{result.precision:.4f}"])
        writer.writerow(["recall", f"{result.recall:.4f}"])
        writer.writerow(["f1", f"{result.f1:.4f}"])
