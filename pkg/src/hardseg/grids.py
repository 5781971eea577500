"""Domain value types for images, labels, and probability maps.

All grids are thin immutable wrappers around numpy arrays.  Images and labels
may be 2D ``[H, W]`` or 3D ``[D, H, W]``; probability maps are per-slice and
channel-major ``[C, H, W]``.  Arrays are C-ordered, so the last axis (W / x)
varies fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hardseg.errors import ConfigError

PROB_SIMPLEX_ATOL = 1e-6


def _owned(arr: np.ndarray, source) -> np.ndarray:
    """A contiguous array the grid owns outright.

    Freezing (writeable=False) must never leak back into an array the caller
    passed in, so copy whenever memory might still be shared with it.
    """
    arr = np.ascontiguousarray(arr)
    if np.may_share_memory(arr, source):
        arr = arr.copy()
    return arr


def _as_float_grid(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim not in (2, 3):
        raise ConfigError(f"intensity grid must be 2D or 3D, got shape {arr.shape}")
    return _owned(arr, values)


@dataclass(frozen=True)
class IntensityGrid:
    """Normalized image intensities plus per-axis physical spacing in mm.

    ``spacing`` is ordered like the array axes: (sy, sx) for 2D grids and
    (sz, sy, sx) for 3D.  Values are expected to lie in [0, 1] once the
    volume has been windowed (see :func:`normalize_intensity`); the
    constructor enforces finiteness and positive spacing, which must hold
    for raw data too.
    """

    values: np.ndarray
    spacing: tuple[float, ...]

    def __post_init__(self):
        arr = _as_float_grid(self.values)
        object.__setattr__(self, "values", arr)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != arr.ndim:
            raise ConfigError(
                f"spacing has {len(spacing)} entries for a {arr.ndim}D grid"
            )
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ConfigError(f"spacing must be strictly positive, got {spacing}")
        if not np.all(np.isfinite(arr)):
            raise ConfigError("intensity grid contains non-finite values")
        object.__setattr__(self, "spacing", spacing)
        self.values.flags.writeable = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class LabelGrid:
    """Integer category labels, shape-matched to a paired IntensityGrid."""

    labels: np.ndarray
    num_categories: int

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ConfigError(f"labels must be integral, got dtype {arr.dtype}")
        if arr.ndim not in (2, 3):
            raise ConfigError(f"label grid must be 2D or 3D, got shape {arr.shape}")
        arr = _owned(arr, self.labels)
        c = int(self.num_categories)
        if c < 2:
            raise ConfigError(f"num_categories must be >= 2, got {c}")
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise ConfigError(
                f"labels outside [0, {c - 1}]: range [{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "num_categories", c)
        self.labels.flags.writeable = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape


@dataclass(frozen=True)
class ProbGrid:
    """Per-pixel category probabilities, channel-major [C, H, W]."""

    probs: np.ndarray

    def __post_init__(self):
        arr = _owned(np.asarray(self.probs, dtype=np.float64), self.probs)
        if arr.ndim != 3:
            raise ConfigError(f"ProbGrid expects [C,H,W], got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ConfigError("ProbGrid needs at least 2 categories")
        if arr.min() < -PROB_SIMPLEX_ATOL or arr.max() > 1 + PROB_SIMPLEX_ATOL:
            raise ConfigError("probabilities outside [0, 1]")
        sums = arr.sum(axis=0)
        if np.abs(sums - 1.0).max() > PROB_SIMPLEX_ATOL:
            worst = float(np.abs(sums - 1.0).max())
            raise ConfigError(f"per-pixel sums deviate from 1 by {worst:.2e}")
        object.__setattr__(self, "probs", arr)
        self.probs.flags.writeable = False

    @property
    def num_categories(self) -> int:
        return self.probs.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.probs.shape[1], self.probs.shape[2]


@dataclass(frozen=True)
class Sample:
    """One training/evaluation case: image, labels, and a stable id."""

    image: IntensityGrid
    labels: LabelGrid
    id: str = field(default="")

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ConfigError(
                f"image shape {self.image.shape} != label shape {self.labels.shape}"
            )


def normalize_intensity(raw: np.ndarray, window: tuple[float, float],
                        spacing: tuple[float, ...] | None = None) -> IntensityGrid:
    """Window raw Hounsfield-unit values into [0, 1].

    output = clamp((raw - lo) / (hi - lo), 0, 1).
    """
    lo, hi = float(window[0]), float(window[1])
    if lo >= hi:
        raise ConfigError(f"window lo must be < hi, got ({lo}, {hi})")
    arr = np.asarray(raw, dtype=np.float64)
    out = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    if spacing is None:
        spacing = (1.0,) * arr.ndim
    return IntensityGrid(out.astype(np.float32), spacing)


def downsample_labels(labels: LabelGrid, target_shape: tuple[int, int]) -> LabelGrid:
    """Nearest-neighbor label downsampling with a top-left anchor.

    Each output pixel (i, j) copies input pixel (i*fh, j*fw).  The target
    shape must divide the source shape exactly; interpolation is never used
    because it could invent categories.  3D grids are resampled slice-wise
    (depth preserved).
    """
    src = labels.labels
    spatial = src.shape[-2:]
    th, tw = int(target_shape[0]), int(target_shape[1])
    if th <= 0 or tw <= 0:
        raise ConfigError(f"target shape must be positive, got {(th, tw)}")
    if spatial[0] % th or spatial[1] % tw:
        raise ConfigError(
            f"target {(th, tw)} does not divide source {tuple(spatial)} exactly"
        )
    fh, fw = spatial[0] // th, spatial[1] // tw
    out = src[..., ::fh, ::fw]
    return LabelGrid(np.ascontiguousarray(out), labels.num_categories)


def one_hot(labels: np.ndarray, num_categories: int) -> np.ndarray:
    """One-hot encode [H,W] int labels to float64 [C,H,W]."""
    arr = np.asarray(labels)
    out = np.zeros((num_categories,) + arr.shape, dtype=np.float64)
    for c in range(num_categories):
        out[c] = arr == c
    return out
