"""From per-stage anomaly maps to pixel, image and novelty scores."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from revdistill.distill import AnomalyMapSet
from revdistill.errors import DataError, ShapeError

DEFAULT_SIGMA = 4.0
TRUNCATE = 4.0  # kernel radius in units of sigma


@dataclass
class ScoreMap:
    """Accumulated anomaly map at image resolution; ``map`` is ``(..., R, R)`` float64."""

    map: np.ndarray
    smoothed: bool
    sigma: float

    @property
    def resolution(self) -> int:
        return self.map.shape[-1]

    def __getitem__(self, i) -> "ScoreMap":
        return ScoreMap(self.map[i], self.smoothed, self.sigma)

    def __len__(self) -> int:
        return len(self.map) if self.map.ndim > 2 else 1


def _as_tensor(m) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(m) if not isinstance(m, torch.Tensor) else m)
    return t.detach().cpu().to(torch.float64)


def upsample(m, out_resolution: int) -> np.ndarray:
    """Bilinear upsampling with half-pixel centres (``align_corners=False``)."""
    t = _as_tensor(m)
    lead = t.shape[:-2]
    t = t.reshape(-1, 1, *t.shape[-2:])
    if max(t.shape[-2:]) > out_resolution:
        raise ShapeError(f"map of size {tuple(t.shape[-2:])} cannot be upsampled to {out_resolution}")
    up = F.interpolate(t, size=(out_resolution, out_resolution), mode="bilinear", align_corners=False)
    return up.reshape(*lead, out_resolution, out_resolution).numpy()


def gaussian_smooth(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return arr
    return gaussian_filter(arr, sigma=sigma, mode="reflect", truncate=TRUNCATE, axes=(-2, -1))


def localization_map(
    maps: AnomalyMapSet | Sequence, out_resolution: int, sigma: float = DEFAULT_SIGMA
) -> ScoreMap:
    """Upsample every stage map to ``out_resolution``, add them up, then Gaussian-smooth.

    ``maps`` may be an :class:`AnomalyMapSet` or a plain sequence of
    ``(..., H_k, W_k)`` arrays. ``sigma=0`` skips smoothing.
    """
    per_stage = maps.per_stage if isinstance(maps, AnomalyMapSet) else list(maps)
    if not per_stage:
        raise ShapeError("at least one stage map is required")
    total = sum(upsample(m, out_resolution) for m in per_stage)
    return ScoreMap(gaussian_smooth(total, sigma), smoothed=sigma > 0, sigma=float(sigma))


def detection_score(s: ScoreMap) -> np.ndarray | float:
    """Image-level score: the maximum of the map (one value per leading index)."""
    out = s.map.max(axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def novelty_score(s: ScoreMap) -> np.ndarray | float:
    """Novelty score: the sum of the map."""
    out = s.map.sum(axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


# --- heatmap files -------------------------------------------------------------


def heatmap_png(score: np.ndarray) -> Image.Image:
    """8-bit grayscale image of one map, min-max normalised."""
    lo, hi = float(score.min()), float(score.max())
    scaled = (score - lo) / (hi - lo) if hi > lo else np.zeros_like(score)
    return Image.fromarray((scaled * 255 + 0.5).astype(np.uint8), mode="L")


def write_sal(path: str | Path, score: np.ndarray) -> Path:
    """Raw float32 grid: header line ``"H W\\n"`` then little-endian row-major values."""
    path = Path(path)
    score = np.asarray(score)
    if score.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {score.shape}")
    with path.open("wb") as f:
        f.write(f"{score.shape[0]} {score.shape[1]}\n".encode("ascii"))
        f.write(score.astype("<f4").tobytes(order="C"))
    return path


def read_sal(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    try:
        h, w = (int(v) for v in data[:nl].decode("ascii").split())
    except ValueError as exc:
        raise DataError(f"{path}: bad header") from exc
    arr = np.frombuffer(data, dtype="<f4", offset=nl + 1)
    if arr.size != h * w:
        raise DataError(f"{path}: expected {h * w} values, found {arr.size}")
    return arr.reshape(h, w).astype(np.float32)


def export_heatmap(out_dir: str | Path, name: str, score: np.ndarray) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{name}.png"
    heatmap_png(score).save(png)
    return png, write_sal(out_dir / f"{name}.sal.f32", score)
