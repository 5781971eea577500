"""PNG rendering: label overlays, uncertainty heatmaps, sweep plots.

The category palette is fixed (documented in the README) so overlay renders
are byte-comparable across runs.  All outputs are written atomically.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from hardseg.errors import ConfigError
from hardseg.grids import IntensityGrid, LabelGrid
from hardseg.mining import UncertaintyMap

# category -> RGB; 0 is background (never painted); repeats past the end
PALETTE = (
    (0, 0, 0),        # 0 background
    (230, 80, 60),    # 1 red
    (70, 160, 235),   # 2 blue
    (250, 200, 40),   # 3 yellow
    (120, 210, 90),   # 4 green
    (190, 100, 225),  # 5 purple
    (255, 140, 30),   # 6 orange
    (90, 220, 210),   # 7 teal
    (240, 120, 190),  # 8 pink
    (150, 150, 150),  # 9 gray
)

OVERLAY_ALPHA = 0.55


def _save_png_atomic(img: Image.Image, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def _to_2d(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ConfigError("PNG rendering expects a single slice")
        arr = arr[0]
    return arr


def overlay_png(image: IntensityGrid, labels: LabelGrid, path) -> None:
    """Grayscale image with alpha-blended category colors on foreground."""
    base = np.clip(_to_2d(image.values).astype(np.float64), 0.0, 1.0)
    lab = _to_2d(np.asarray(labels.labels))
    if base.shape != lab.shape:
        raise ConfigError(f"image {base.shape} vs labels {lab.shape}")
    rgb = np.repeat((base * 255.0)[..., None], 3, axis=2)
    for k in range(1, labels.num_categories):
        color = np.array(PALETTE[k % len(PALETTE)], dtype=np.float64)
        sel = lab == k
        rgb[sel] = (1 - OVERLAY_ALPHA) * rgb[sel] + OVERLAY_ALPHA * color
    out = Image.fromarray(np.round(rgb).astype(np.uint8), mode="RGB")
    _save_png_atomic(out, Path(path))


def heatmap_png(u: UncertaintyMap, path) -> None:
    """8-bit grayscale heatmap of an uncertainty map."""
    arr = np.round(u.values * 255.0).astype(np.uint8)
    _save_png_atomic(Image.fromarray(arr, mode="L"), Path(path))


def sweep_plot_png(rows, path) -> None:
    """DSC vs threshold on a log-scale x axis, hard fraction dashed."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = [r.threshold for r in rows]
    dscs = [r.mean_dsc_pct for r in rows]
    fracs = [100.0 * r.hard_fraction for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(ts, dscs, "o-", color="#2166ac", label="mean DSC (%)")
    ax.plot(ts, fracs, "s--", color="#b2182b", label="hard pixels (%)")
    ax.set_xscale("log")
    ax.set_xlabel("uncertainty threshold T")
    ax.set_ylabel("percent")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png", dpi=110)
    plt.close(fig)
    os.replace(tmp, path)
