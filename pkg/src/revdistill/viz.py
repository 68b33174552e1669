"""Charts and heatmap overlays (matplotlib, headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from revdistill.metrics import Histogram  # noqa: E402


def histogram_chart(hist: Histogram, path: str | Path, title: str | None = None) -> Path:
    """Side-by-side bars of normal vs anomalous counts over normalised score bins."""
    edges = np.asarray(hist.edges)
    centers = (edges[:-1] + edges[1:]) / 2
    width = (edges[1] - edges[0]) * 0.45
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(centers - width / 2, hist.normal, width=width, label="normal", color="tab:green")
    ax.bar(centers + width / 2, hist.anomalous, width=width, label="anomalous", color="tab:red")
    ax.set_xlim(0, 1)
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def colorize(score: np.ndarray, cmap: str = "jet") -> np.ndarray:
    lo, hi = float(score.min()), float(score.max())
    scaled = (score - lo) / (hi - lo) if hi > lo else np.zeros_like(score)
    return (plt.get_cmap(cmap)(scaled)[..., :3] * 255).astype(np.uint8)


def overlay(score: np.ndarray, image: np.ndarray | None = None, alpha: float = 0.5) -> Image.Image:
    """Colour heatmap, blended over ``image`` (resized to the map) when given."""
    heat = colorize(score)
    if image is None:
        return Image.fromarray(heat)
    base = Image.fromarray(image).convert("RGB").resize(heat.shape[1::-1], Image.BILINEAR)
    return Image.blend(base, Image.fromarray(heat), alpha)
