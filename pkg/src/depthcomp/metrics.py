"""Depth-completion error metrics and the power-law fit of error vs. sample count.

Depths are in meters. RMSE and MAE are reported in millimeters, the inverse
metrics in 1/km. Only pixels with ground truth (gt > 0) are evaluated.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

CLIP_TAU_M = 0.9
METRIC_NAMES = ("rmse_mm", "mae_mm", "irmse_per_km", "imae_per_km")


@dataclass(frozen=True)
class MetricReport:
    rmse_mm: Optional[float]
    mae_mm: Optional[float]
    irmse_per_km: Optional[float]
    imae_per_km: Optional[float]
    valid_pixel_count: int

    @property
    def defined(self) -> bool:
        return self.valid_pixel_count > 0

    def as_row(self) -> list:
        return ["" if v is None else repr(float(v)) for v in
                (self.rmse_mm, self.mae_mm, self.irmse_per_km, self.imae_per_km)] + [self.valid_pixel_count]


EMPTY_REPORT = MetricReport(None, None, None, None, 0)


def _valid_pairs(pred, gt, tau: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"evaluate: prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = gt > 0
    p, g = pred[mask], gt[mask]
    # non-positive predictions fall back to the clip floor so inverses stay finite
    p_inv = np.where(p > 0, p, tau)
    return p, g, p_inv


def _report(p, g, p_inv) -> MetricReport:
    n = int(p.size)
    if n == 0:
        return EMPTY_REPORT
    err = p - g
    ierr = 1.0 / p_inv - 1.0 / g
    return MetricReport(
        rmse_mm=math.sqrt(float(np.mean(err * err))) * 1000.0,
        mae_mm=float(np.mean(np.abs(err))) * 1000.0,
        irmse_per_km=math.sqrt(float(np.mean(ierr * ierr))) * 1000.0,
        imae_per_km=float(np.mean(np.abs(ierr))) * 1000.0,
        valid_pixel_count=n,
    )


def evaluate(pred, gt, tau: float = CLIP_TAU_M) -> MetricReport:
    """Metrics over pixels with gt > 0."""
    return _report(*_valid_pairs(pred, gt, tau))


def evaluate_many(preds: Sequence, gts: Sequence, tau: float = CLIP_TAU_M):
    """Per-frame reports, the pixel-pooled aggregate, and the mean of per-frame metrics."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    per_frame, ps, gs, pis = [], [], [], []
    for pred, gt in zip(preds, gts):
        p, g, p_inv = _valid_pairs(pred, gt, tau)
        per_frame.append(_report(p, g, p_inv))
        ps.append(p)
        gs.append(g)
        pis.append(p_inv)
    pooled = _report(np.concatenate(ps), np.concatenate(gs), np.concatenate(pis)) if ps else EMPTY_REPORT
    return per_frame, pooled, frame_mean(per_frame)


def frame_mean(reports: Iterable[MetricReport]) -> MetricReport:
    reports = [r for r in reports if r.defined]
    if not reports:
        return EMPTY_REPORT
    vals = [float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES]
    return MetricReport(*vals, valid_pixel_count=sum(r.valid_pixel_count for r in reports))


def write_metrics_csv(path: str, frame_ids: Sequence[str], per_frame: Sequence[MetricReport],
                      pooled: MetricReport, mean: MetricReport) -> None:
    """frame_id, metrics, valid_pixels; then rows ``aggregate_pooled`` and ``aggregate_frame_mean``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", *METRIC_NAMES, "valid_pixels"])
        for fid, rep in zip(frame_ids, per_frame):
            w.writerow([fid, *rep.as_row()])
        w.writerow(["aggregate_pooled", *pooled.as_row()])
        w.writerow(["aggregate_frame_mean", *mean.as_row()])


def read_metrics_csv(path: str) -> dict:
    """frame_id -> dict of floats (empty metrics become None)."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["frame_id"]] = {k: (float(v) if v != "" else None) for k, v in row.items() if k != "frame_id"}
    return out


@dataclass(frozen=True)
class PowerLawFit:
    c: float
    p: float
    r_squared: float


def power_law_fit(points: Sequence[Tuple[float, float]]) -> PowerLawFit:
    """Least-squares line through (log n, log rmse): rmse ~ c * n^p."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError(f"power_law_fit needs at least 3 (n, rmse) points, got {len(pts)}")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ValueError("power_law_fit needs finite positive sample counts and errors")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(x) == 0:
        raise ValueError("power_law_fit needs at least two distinct sample counts")
    p, intercept = np.polyfit(x, y, 1)
    resid = y - (p * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    # a flat curve is fit exactly by slope 0
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return PowerLawFit(float(np.exp(intercept)), float(p), r2)


def write_power_law_csv(path: str, points: Sequence[Tuple[float, float]], fit: PowerLawFit) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c", "p", "r_squared"])
        w.writerow([repr(fit.c), repr(fit.p), repr(fit.r_squared)])
        w.writerow([])
        w.writerow(["n_samples", "rmse", "log_n", "log_rmse", "fit_rmse"])
        for n, r in points:
            w.writerow([n, repr(float(r)), repr(math.log(n)), repr(math.log(r)), repr(fit.c * n ** fit.p)])


def read_points_csv(path: str) -> List[Tuple[float, float]]:
    """(n_samples, rmse) pairs from a two-column CSV with a header row."""
    pts = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    for row in rows[1:]:
        if len(row) >= 2 and row[0].strip():
            pts.append((float(row[0]), float(row[1])))
    return pts
