"""Point-level precision / recall / F-score between two hairstyles.

A predicted point counts as matched when some reference point lies within
the distance threshold AND the two local directions agree within the angle
threshold; any neighbor suffices (one-to-many matching).  Precision is the
matched fraction of predicted points, recall the matched fraction of the
ground truth, each in percent.  Directions compare modulo a line flip by
default; `directed` makes growth direction part of the match.

Both hairstyles are resampled to a common point count per strand before
matching, which is what makes the swap symmetry exact: evaluate(a, b) and
evaluate(b, a) see the same two point sets with the roles exchanged.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .strands import Hairstyle, resample

Array = np.ndarray

# nominal adult scalp radius in meters; desk-scale scenes state their
# thresholds relative to this
REFERENCE_SCALP_RADIUS = 0.09

DEFAULT_THRESHOLDS = ((2.0, 20.0), (3.0, 30.0), (4.0, 40.0))
EVAL_LENGTH = 100
DEFAULT_MAX_STRANDS = 50_000


@dataclass
class MetricThresholds:
    """(distance mm, angle degrees) pairs to score at."""

    pairs: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        self.pairs = tuple((float(d), float(a)) for d, a in self.pairs)
        for d, a in self.pairs:
            if d <= 0 or a <= 0:
                raise ValueError("thresholds must be positive")

    def scaled(self, scalp_radius: float,
               reference: float = REFERENCE_SCALP_RADIUS) -> "MetricThresholds":
        """Distance thresholds rescaled to a scene whose scalp radius
        differs from head scale; angles are scale-free."""
        k = scalp_radius / reference
        return MetricThresholds(tuple((d * k, a) for d, a in self.pairs))


@dataclass
class MetricReport:
    """Per-threshold scores in percent."""

    thresholds: tuple
    precision: Array
    recall: Array
    fscore: Array
    empty_prediction: bool = False

    def row(self, i: int):
        d, a = self.thresholds[i]
        return {"threshold_mm": d, "threshold_deg": a,
                "precision": float(self.precision[i]),
                "recall": float(self.recall[i]),
                "fscore": float(self.fscore[i])}


def fscore(precision: float, recall: float) -> float:
    """Harmonic aggregation; zero whenever both sides are zero."""
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def _point_table(hairstyle: Hairstyle, length: int, mm_per_unit: float):
    """Resampled positions (in mm) and per-point unit directions.

    Strands with zero arc length carry no direction and are dropped; a
    fully collapsed hairstyle yields empty tables.
    """
    keep = [s for s in hairstyle.strands
            if np.linalg.norm(np.diff(s.points, axis=0), axis=1).sum() > 0.0]
    if not keep:
        return np.zeros((0, 3)), np.zeros((0, 3))
    pts = np.stack([resample(s.points, length).points for s in keep])
    d = np.diff(pts, axis=1)
    d = d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)
    dirs = np.concatenate([d, d[:, -1:]], axis=1)
    return (pts * mm_per_unit).reshape(-1, 3), dirs.reshape(-1, 3)


def match_points(query_pts: Array, query_dirs: Array, ref_pts: Array,
                 ref_dirs: Array, dist: float, angle_deg: float,
                 directed: bool = False) -> Array:
    """Boolean mask: query points with a qualifying reference neighbor.

    KD-tree ball queries supply the distance candidates; the angle test
    runs on the flattened candidate list.
    """
    balls = cKDTree(ref_pts).query_ball_point(query_pts, dist)
    counts = np.array([len(b) for b in balls])
    out = np.zeros(len(query_pts), dtype=bool)
    if counts.sum() == 0:
        return out
    qi = np.repeat(np.arange(len(query_pts)), counts)
    ri = np.concatenate([b for b in balls if b]).astype(np.int64)
    dots = (query_dirs[qi] * ref_dirs[ri]).sum(axis=1)
    cos_lim = np.cos(np.deg2rad(angle_deg))
    ok = dots >= cos_lim if directed else np.abs(dots) >= cos_lim
    np.logical_or.at(out, qi[ok], True)
    return out


def match_points_brute(query_pts: Array, query_dirs: Array, ref_pts: Array,
                       ref_dirs: Array, dist: float, angle_deg: float,
                       directed: bool = False) -> Array:
    """All-pairs reference for match_points."""
    d2 = ((query_pts[:, None] - ref_pts[None]) ** 2).sum(axis=2)
    dots = query_dirs @ ref_dirs.T
    cos_lim = np.cos(np.deg2rad(angle_deg))
    ang = dots >= cos_lim if directed else np.abs(dots) >= cos_lim
    return np.any((d2 <= dist * dist) & ang, axis=1)


def _subsample(style: Hairstyle, limit: int, seed: int) -> Hairstyle:
    if len(style) <= limit:
        return style
    keep = np.random.default_rng(seed).choice(len(style), size=limit,
                                              replace=False)
    roots = style.roots[keep] if style.roots is not None else None
    return Hairstyle([style.strands[i] for i in keep], roots=roots)


def evaluate(pred: Hairstyle, gt: Hairstyle,
             thresholds: MetricThresholds | None = None,
             max_strands: int = DEFAULT_MAX_STRANDS, seed: int = 0,
             directed: bool = False, length: int = EVAL_LENGTH,
             mm_per_unit: float = 1000.0) -> MetricReport:
    """Score a prediction against ground truth at every threshold pair.

    Strand coordinates are meters unless mm_per_unit says otherwise; an
    empty prediction yields a zero report with the flag set rather than an
    error.
    """
    th = thresholds or MetricThresholds()
    if len(gt) == 0:
        raise ValueError("ground truth hairstyle is empty")
    k = len(th.pairs)
    if len(pred) == 0:
        z = np.zeros(k)
        return MetricReport(th.pairs, z, z.copy(), z.copy(),
                            empty_prediction=True)
    pp, pd = _point_table(_subsample(pred, max_strands, seed), length,
                          mm_per_unit)
    if len(pp) == 0:
        z = np.zeros(k)
        return MetricReport(th.pairs, z, z.copy(), z.copy(),
                            empty_prediction=True)
    gp, gd = _point_table(_subsample(gt, max_strands, seed + 1), length,
                          mm_per_unit)
    if len(gp) == 0:
        raise ValueError("ground truth hairstyle is empty")
    precision = np.zeros(k)
    recall = np.zeros(k)
    fs = np.zeros(k)
    for i, (d, a) in enumerate(th.pairs):
        precision[i] = 100.0 * match_points(pp, pd, gp, gd, d, a,
                                            directed).mean()
        recall[i] = 100.0 * match_points(gp, gd, pp, pd, d, a,
                                         directed).mean()
        fs[i] = fscore(precision[i], recall[i])
    return MetricReport(th.pairs, precision, recall, fs)


METRIC_CSV_COLUMNS = ["threshold_mm", "threshold_deg", "precision",
                      "recall", "fscore"]


def write_metric_csv(path: str, report: MetricReport):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(METRIC_CSV_COLUMNS)
        for i in range(len(report.thresholds)):
            row = report.row(i)
            wr.writerow([row[c] for c in METRIC_CSV_COLUMNS])
