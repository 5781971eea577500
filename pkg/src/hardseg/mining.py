"""High-uncertainty region mining.

Per-pixel normalized entropy of a probability map, strict thresholding into a
binary hard-region mask, and masking of the map so that only hard pixels
survive (non-hard pixels become all-zero "hole" vectors, counted separately).

The numpy functions are the public single-map API; the ``*_torch`` variants
are what the training loop uses so the retained-pixel path stays
differentiable while the mask itself is treated as a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from hardseg.errors import ConfigError
from hardseg.grids import ProbGrid


@dataclass(frozen=True)
class UncertaintyMap:
    """Normalized entropy per pixel, in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if arr.ndim != 2:
            raise ConfigError(f"uncertainty map must be [H,W], got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ConfigError("uncertainty values outside [0, 1]")
        object.__setattr__(self, "values", arr)
        self.values.flags.writeable = False


@dataclass(frozen=True)
class HardMask:
    """Binary hard-region mask plus the threshold that produced it."""

    mask: np.ndarray
    threshold_used: float

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.mask))
        if arr.ndim != 2:
            raise ConfigError(f"mask must be [H,W], got {arr.shape}")
        arr = (arr != 0).astype(np.uint8)
        if self.threshold_used < 0:
            raise ConfigError("threshold must be >= 0")
        object.__setattr__(self, "mask", arr)
        self.mask.flags.writeable = False

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def uncertainty_map(y: ProbGrid) -> UncertaintyMap:
    """U(h,w) = -sum_c y log y / log C, with 0 log 0 = 0, clamped to [0,1].

    The clamp exists because for non-power-of-two C the uniform pixel's
    entropy lands one ulp above 1 in float64.
    """
    p = y.probs
    c = p.shape[0]
    if c < 2:
        raise ConfigError("entropy needs at least 2 categories")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    u = -terms.sum(axis=0) / math.log(c)
    return UncertaintyMap(np.clip(u, 0.0, 1.0))


def binarize(u: UncertaintyMap, threshold: float) -> HardMask:
    """mask = 1 exactly where U > T (strict, so T=1 gives the empty region)."""
    if threshold < 0:
        raise ConfigError("threshold must be >= 0")
    return HardMask(u.values > threshold, float(threshold))


def mask_probs(y: ProbGrid, mask: HardMask):
    """Zero out non-hard pixels; returns (masked array [C,H,W], hole count).

    The result is not a valid ProbGrid: holes carry the all-zero vector by
    convention, which downstream branches consume as a feature map.
    """
    if mask.mask.shape != y.spatial_shape:
        raise ConfigError(
            f"mask shape {mask.mask.shape} != map shape {y.spatial_shape}"
        )
    keep = mask.mask.astype(y.probs.dtype)
    masked = y.probs * keep[None]
    holes = int(mask.mask.size - mask.count)
    return masked, holes


# --- torch training path ---------------------------------------------------


def entropy_torch(probs: torch.Tensor) -> torch.Tensor:
    """Differentiable normalized entropy of [..., C, H, W] over the C axis."""
    c = probs.shape[-3]
    u = -torch.special.xlogy(probs, probs).sum(dim=-3) / math.log(c)
    return u.clamp(0.0, 1.0)


def hard_mask_torch(u: torch.Tensor, threshold: float) -> torch.Tensor:
    """Strict threshold; detached by construction (comparison output)."""
    return (u > threshold).detach()


def apply_mask_torch(probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero non-hard pixels of [..., C, H, W]; gradients flow only through
    retained pixels because the mask is a constant 0/1 factor."""
    return probs * mask.to(probs.dtype).unsqueeze(-3)
