"""Deterministic synthetic phantoms for desk-scale experiments.

Each phantom is a 2D slice with a handful of "organs" chosen to reproduce the
difficulty axes of head-and-neck CT without clinical data: one large regular
structure (ellipse), one thin curved structure (arc band), one small
low-contrast irregular structure (a rotated X occupying < 2% of pixels), and
one bilaterally mirrored pair.  Geometry is analytic, rasterized at pixel
centers; intensities are per-organ contrast plus Gaussian noise, clamped to
[0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from hardseg.errors import ConfigError
from hardseg.grids import IntensityGrid, LabelGrid, Sample
from hardseg.seeding import substream

# All organ lengths below are fractions of min(H, W); centers are fractions
# of (H, W).  Pixel (i, j) has center coordinates (i + 0.5, j + 0.5).


@dataclass(frozen=True)
class Ellipse:
    category: int
    contrast: float
    center: tuple[float, float]
    axes: tuple[float, float]  # (semi-minor along y, semi-major along x)
    angle_deg: float = 0.0


@dataclass(frozen=True)
class TubeArc:
    """A thin curved band: the set of points within thickness/2 of a circular
    arc of the given radius around center, limited to [arc start, arc end]."""

    category: int
    contrast: float
    center: tuple[float, float]
    radius: float
    thickness: float
    arc_deg: tuple[float, float] = (0.0, 360.0)


@dataclass(frozen=True)
class CrossMark:
    """Two crossed bars (an X when rotated 45 degrees)."""

    category: int
    contrast: float
    center: tuple[float, float]
    arm: float        # half-length of each bar
    width: float      # half-thickness of each bar
    angle_deg: float = 45.0


@dataclass(frozen=True)
class MirroredPair:
    """Two identical ellipses mirrored about the vertical midline."""

    category: int
    contrast: float
    center: tuple[float, float]  # center of the left member; right is (y, 1-x)
    axes: tuple[float, float]


Organ = Ellipse | TubeArc | CrossMark | MirroredPair


@dataclass(frozen=True)
class PhantomSpec:
    image_size: tuple[int, int] = (64, 64)
    num_categories: int = 5
    organs: tuple[Organ, ...] = ()
    noise_sigma: float = 0.0
    background: float = 0.1
    spacing: tuple[float, float] = (1.0, 1.0)
    position_jitter: float = 0.0  # max |center shift| per axis, fractional
    max_cross_fraction: float = 0.02

    def __post_init__(self):
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigError(f"image size too small: {self.image_size}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not (0.0 <= self.background <= 1.0):
            raise ConfigError("background contrast must lie in [0, 1]")
        for organ in self.organs:
            if not 1 <= organ.category < self.num_categories:
                raise ConfigError(
                    f"organ category {organ.category} outside "
                    f"[1, {self.num_categories - 1}]"
                )
            if not (0.0 <= organ.contrast <= 1.0):
                raise ConfigError("organ contrast must lie in [0, 1]")
            if organ.contrast == self.background:
                raise ConfigError(
                    f"organ category {organ.category} contrast equals background"
                )


def default_spec(num_categories: int = 5, noise_sigma: float = 0.15,
                 position_jitter: float = 0.03,
                 image_size: tuple[int, int] = (64, 64)) -> PhantomSpec:
    """The standard experiment phantom.

    With C=5 all four organ kinds appear; C=4 drops the mirrored pair
    (ellipse + tube + cross only).  The cross is deliberately low-contrast
    against the 0.1 background so it stays the hard structure.
    """
    organs: list[Organ] = [
        Ellipse(category=1, contrast=0.65, center=(0.32, 0.30),
                axes=(0.11, 0.15), angle_deg=20.0),
        TubeArc(category=2, contrast=0.85, center=(0.50, 0.24),
                radius=0.40, thickness=0.028, arc_deg=(330.0, 30.0)),
        CrossMark(category=3, contrast=0.22, center=(0.80, 0.34),
                  arm=0.070, width=0.016, angle_deg=45.0),
    ]
    if num_categories >= 5:
        organs.append(MirroredPair(category=4, contrast=0.45,
                                   center=(0.56, 0.80), axes=(0.050, 0.034)))
    if num_categories not in (4, 5):
        raise ConfigError("default_spec supports num_categories 4 or 5")
    return PhantomSpec(image_size=image_size, num_categories=num_categories,
                       organs=tuple(organs), noise_sigma=noise_sigma,
                       position_jitter=position_jitter)


def _pixel_coords(h: int, w: int):
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return yy, xx


def _ellipse_mask(h, w, scale, center_px, axes, angle_deg):
    yy, xx = _pixel_coords(h, w)
    dy = yy - center_px[0]
    dx = xx - center_px[1]
    th = math.radians(angle_deg)
    ry = math.cos(th) * dy - math.sin(th) * dx
    rx = math.sin(th) * dy + math.cos(th) * dx
    ay = max(axes[0] * scale, 1e-6)
    ax = max(axes[1] * scale, 1e-6)
    return (ry / ay) ** 2 + (rx / ax) ** 2 <= 1.0


def _rasterize(organ: Organ, h: int, w: int, center_px) -> np.ndarray:
    scale = min(h, w)
    if isinstance(organ, Ellipse):
        return _ellipse_mask(h, w, scale, center_px, organ.axes, organ.angle_deg)
    if isinstance(organ, TubeArc):
        yy, xx = _pixel_coords(h, w)
        dy = yy - center_px[0]
        dx = xx - center_px[1]
        r = np.hypot(dy, dx)
        band = np.abs(r - organ.radius * scale) <= organ.thickness * scale
        ang = np.degrees(np.arctan2(dy, dx)) % 360.0
        a0, a1 = organ.arc_deg[0] % 360.0, organ.arc_deg[1] % 360.0
        if a0 <= a1:
            in_arc = (ang >= a0) & (ang <= a1)
        else:
            in_arc = (ang >= a0) | (ang <= a1)
        return band & in_arc
    if isinstance(organ, CrossMark):
        yy, xx = _pixel_coords(h, w)
        dy = yy - center_px[0]
        dx = xx - center_px[1]
        th = math.radians(organ.angle_deg)
        ry = math.cos(th) * dy - math.sin(th) * dx
        rx = math.sin(th) * dy + math.cos(th) * dx
        arm = organ.arm * scale
        width = organ.width * scale
        bar1 = (np.abs(ry) <= width) & (np.abs(rx) <= arm)
        bar2 = (np.abs(rx) <= width) & (np.abs(ry) <= arm)
        return bar1 | bar2
    if isinstance(organ, MirroredPair):
        left = _ellipse_mask(h, w, scale, center_px, organ.axes, 0.0)
        mirrored = (center_px[0], w - center_px[1])
        right = _ellipse_mask(h, w, scale, mirrored, organ.axes, 0.0)
        return left | right
    raise ConfigError(f"unknown organ kind {type(organ).__name__}")


def generate_phantom(spec: PhantomSpec, seed: int,
                     sample_id: str | None = None) -> Sample:
    """Rasterize one phantom; pure function of (spec, seed).

    Rejects specs whose organs overlap by more than 10% of the smaller
    organ's pixel area, whose organs rasterize to nothing, or whose cross
    exceeds the small-structure pixel budget.
    """
    h, w = spec.image_size
    rng = np.random.default_rng(substream(seed, "phantom-geometry"))

    masks: list[tuple[Organ, np.ndarray]] = []
    for organ in spec.organs:
        cy, cx = organ.center
        if spec.position_jitter > 0:
            cy = cy + rng.uniform(-spec.position_jitter, spec.position_jitter)
            cx = cx + rng.uniform(-spec.position_jitter, spec.position_jitter)
        mask = _rasterize(organ, h, w, (cy * h, cx * w))
        if not mask.any():
            raise ConfigError(
                f"organ category {organ.category} rasterized to zero pixels"
            )
        masks.append((organ, mask))

    for a in range(len(masks)):
        for b in range(a + 1, len(masks)):
            inter = int((masks[a][1] & masks[b][1]).sum())
            smaller = min(int(masks[a][1].sum()), int(masks[b][1].sum()))
            if inter > 0.1 * smaller:
                raise ConfigError(
                    f"organs {masks[a][0].category} and {masks[b][0].category} "
                    f"overlap by {inter} px (> 10% of the smaller organ)"
                )

    labels = np.zeros((h, w), dtype=np.uint8)
    image = np.full((h, w), spec.background, dtype=np.float64)
    for organ, mask in masks:  # later-listed organs win overlaps
        labels[mask] = organ.category
        image[mask] = organ.contrast
        if isinstance(organ, CrossMark):
            frac = mask.sum() / (h * w)
            if frac >= spec.max_cross_fraction:
                raise ConfigError(
                    f"cross organ covers {frac:.1%} of pixels "
                    f"(budget {spec.max_cross_fraction:.1%})"
                )

    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng(substream(seed, "phantom-noise"))
        image = image + noise_rng.normal(0.0, spec.noise_sigma, size=(h, w))
    image = np.clip(image, 0.0, 1.0)

    return Sample(
        image=IntensityGrid(image.astype(np.float32), spec.spacing),
        labels=LabelGrid(labels, spec.num_categories),
        id=sample_id if sample_id is not None else f"phantom-{seed}",
    )


def generate_dataset(spec: PhantomSpec, count: int, seed: int) -> list[Sample]:
    """count phantoms with per-sample seeds split off the base seed.

    A jittered draw whose geometry happens to violate the overlap guard is
    rejected and redrawn from the next derived sub-seed, so the dataset stays
    a pure function of (spec, count, seed).
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    out = []
    for i in range(count):
        last_err = None
        for attempt in range(20):
            try:
                out.append(generate_phantom(spec, substream(seed, "sample", i, attempt),
                                            sample_id=f"phantom-{i:04d}"))
                break
            except ConfigError as err:
                last_err = err
        else:
            raise ConfigError(
                f"could not draw a valid phantom for sample {i}: {last_err}"
            )
    return out
