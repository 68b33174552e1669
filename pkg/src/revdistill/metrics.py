"""Detection and localisation metrics: AUROC, pixel AUROC, per-region overlap, histograms."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from revdistill.errors import MetricError

MAX_THRESHOLDS = 5000
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _check_labeled(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 (normal) or 1 (anomalous)")
    if not np.isfinite(s).all():
        raise MetricError("scores contain non-finite values")
    return s, y.astype(bool)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random anomalous sample outscores a random normal one, ties counting half.

    Computed from average ranks (Mann-Whitney U), O(n log n).

    Raises:
        MetricError: if either class is missing.
    """
    s, y = _check_labeled(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one normal and one anomalous sample")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _stack_maps(score_maps, masks) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(score_maps, "map"):
        score_maps = score_maps.map
    maps = [np.asarray(getattr(m, "map", m), dtype=np.float64) for m in score_maps]
    gts = [np.asarray(m).astype(bool) for m in masks]
    if len(maps) != len(gts):
        raise MetricError(f"{len(maps)} score maps but {len(gts)} masks")
    for i, (m, g) in enumerate(zip(maps, gts)):
        if m.shape != g.shape or m.ndim != 2:
            raise MetricError(f"sample {i}: score map {m.shape} and mask {g.shape} are not aligned 2-D grids")
    return np.stack(maps), np.stack(gts)


def pixel_auroc(score_maps, masks) -> float:
    """AUROC over every pixel of every image."""
    maps, gts = _stack_maps(score_maps, masks)
    if not gts.any():
        raise MetricError("no anomalous pixels in the ground truth")
    return auroc(maps.ravel(), gts.ravel())


def pro_curve(score_maps, masks, max_thresholds: int = MAX_THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """False-positive rate and mean per-region overlap over a descending threshold sweep.

    A pixel counts as detected when its score is ``>= threshold``. Regions are
    8-connected components of each mask. The returned curve starts at ``(0, 0)``.
    """
    maps, gts = _stack_maps(score_maps, masks)
    weights = np.zeros(gts.shape, dtype=np.float64)
    sizes = []
    labelled = []
    for g in gts:
        lab, n = ndimage.label(g, structure=EIGHT_CONNECTED)
        labelled.append((lab, n))
        sizes.extend(np.bincount(lab.ravel(), minlength=n + 1)[1:].tolist())
    n_regions = len(sizes)
    if n_regions == 0:
        raise MetricError("PRO needs at least one ground-truth region")
    for i, (lab, n) in enumerate(labelled):
        if n:
            per_region = np.bincount(lab.ravel(), minlength=n + 1).astype(np.float64)
            inv = np.zeros(n + 1)
            inv[1:] = 1.0 / (per_region[1:] * n_regions)
            weights[i] = inv[lab]
    normal = ~gts
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise MetricError("PRO needs normal pixels to measure false positives")

    s = maps.ravel()
    order = np.argsort(-s, kind="stable")
    s_desc = s[order]
    cum_fp = np.cumsum(normal.ravel()[order]) / n_normal
    cum_pro = np.cumsum(weights.ravel()[order])

    uniq = np.unique(s)
    if uniq.size <= max_thresholds:
        thresholds = uniq[::-1]
    else:
        thresholds = np.unique(np.quantile(s, np.linspace(0.0, 1.0, max_thresholds)))[::-1]
    # number of pixels with score >= t, via the ascending copy
    n_ge = s.size - np.searchsorted(s_desc[::-1], thresholds, side="left")
    fpr = np.concatenate([[0.0], cum_fp[n_ge - 1]])
    pro = np.concatenate([[0.0], cum_pro[n_ge - 1]])
    return fpr, pro


def _area_to(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    x0, x1, y0, y1 = x[:-1], x[1:], y[:-1], y[1:]
    keep = x0 < limit
    x0, x1, y0, y1 = x0[keep], x1[keep], y0[keep], y1[keep]
    over = x1 > limit
    dx = np.where(x1 > x0, x1 - x0, 1.0)
    y1 = np.where(over, y0 + (y1 - y0) * (limit - x0) / dx, y1)
    x1 = np.where(over, limit, x1)
    return float(np.sum((x1 - x0) * (y0 + y1) / 2.0))


def pro_score(score_maps, masks, fpr_limit: float = 0.3, max_thresholds: int = MAX_THRESHOLDS) -> float:
    """Area under the per-region-overlap vs FPR curve up to ``fpr_limit``, divided by ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise MetricError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(score_maps, masks, max_thresholds)
    return _area_to(fpr, pro, fpr_limit) / fpr_limit


@dataclass
class Histogram:
    edges: list[float]
    normal: list[int]
    anomalous: list[int]

    def rows(self) -> list[dict]:
        return [
            {"bin_lo": lo, "bin_hi": hi, "normal": n, "anomalous": a}
            for lo, hi, n, a in zip(self.edges[:-1], self.edges[1:], self.normal, self.anomalous)
        ]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["bin_lo", "bin_hi", "normal", "anomalous"])
            w.writeheader()
            w.writerows(self.rows())
        return path


def score_histogram(scores: Sequence[float], labels: Sequence[int], bins: int = 20) -> Histogram:
    """Min-max normalise scores to [0, 1] and count each class per bin (last bin closed)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    edges = np.linspace(0.0, 1.0, bins + 1)
    if s.size:
        lo, hi = s.min(), s.max()
        s = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    normal, _ = np.histogram(s[~y], bins=edges)
    anomalous, _ = np.histogram(s[y], bins=edges)
    return Histogram(edges.tolist(), normal.astype(int).tolist(), anomalous.astype(int).tolist())


@dataclass
class EvalReport:
    image_auroc: float
    pixel_auroc: float | None = None
    pro_score: float | None = None
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    histogram: Histogram | None = None
    config: dict = field(default_factory=dict)
    samples: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name in ("image_auroc", "pixel_auroc", "pro_score"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise MetricError(f"{name} = {v} outside [0, 1]")

    def summary(self) -> dict:
        out = {"image_auroc": self.image_auroc, "pixel_auroc": self.pixel_auroc, "pro_score": self.pro_score}
        if self.per_class:
            out["per_class"] = self.per_class
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        return d

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"report": out_dir / "report.json", "scores": out_dir / "scores.csv"}
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with paths["scores"].open("w", newline="") as f:
            fields = ["name", "defect_type", "label", "score"]
            w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.samples)
        if self.histogram is not None:
            paths["histogram"] = self.histogram.write_csv(out_dir / "histogram.csv")
        return paths
