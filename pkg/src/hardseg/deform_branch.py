"""Deformable-convolution refinement branch.

Each layer predicts, with an ordinary zero-initialized convolution, a (dy,dx)
displacement for every kernel tap at every output location, then evaluates
the main convolution on bilinearly sampled deformed positions.  Zero-init
makes layer 0 of training exactly a standard convolution, which is also the
degeneracy the tests pin.

Sampling uses zero padding: corners outside the grid read 0, matching the
hole convention of the masked maps this branch consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from hardseg.errors import ConfigError

LEAKY_SLOPE = 0.01


def bilinear_sample(grid: torch.Tensor, sy: torch.Tensor,
                    sx: torch.Tensor) -> torch.Tensor:
    """Sample [B,K,H,W] at real positions sy/sx [B,Ho,Wo] -> [B,K,Ho,Wo].

    4-corner bilinear interpolation; out-of-range corners contribute zero.
    Differentiable in grid and in the sample positions (through the
    interpolation weights).
    """
    b, k, h, w = grid.shape
    ho, wo = sy.shape[-2:]
    sy = sy.expand(b, ho, wo)
    sx = sx.expand(b, ho, wo)
    y0 = sy.floor()
    x0 = sx.floor()
    wy1 = sy - y0
    wx1 = sx - x0

    flat = grid.reshape(b, k, h * w)
    out = grid.new_zeros(b, k, ho, wo)
    for yy, wy in ((y0, 1.0 - wy1), (y0 + 1.0, wy1)):
        for xx, wx in ((x0, 1.0 - wx1), (x0 + 1.0, wx1)):
            inside = (yy >= 0) & (yy <= h - 1) & (xx >= 0) & (xx <= w - 1)
            iy = yy.clamp(0, h - 1).long()
            ix = xx.clamp(0, w - 1).long()
            idx = (iy * w + ix).reshape(b, 1, ho * wo).expand(b, k, ho * wo)
            vals = flat.gather(2, idx).reshape(b, k, ho, wo)
            coeff = (wy * wx) * inside.to(grid.dtype)
            out = out + vals * coeff.unsqueeze(1)
    return out


def bilinear_sample_point(grid: torch.Tensor, point) -> torch.Tensor:
    """Single-point convenience form: [K,H,W] at (y, x) -> [K]."""
    y, x = point
    sy = torch.tensor([[float(y)]], dtype=grid.dtype, device=grid.device)
    sx = torch.tensor([[float(x)]], dtype=grid.dtype, device=grid.device)
    return bilinear_sample(grid.unsqueeze(0), sy.unsqueeze(0),
                           sx.unsqueeze(0)).reshape(grid.shape[0])


def deform_apply(inp: torch.Tensor, offsets: torch.Tensor,
                 weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Deformable convolution given an explicit offset field.

    inp [B,K,H,W]; offsets [B,2*k*k,H,W] as (dy,dx) per row-major tap;
    weight [K',K,k,k]; output [B,K',H,W] with same-size zero padding.
    """
    b, k_in, h, w = inp.shape
    k_out, _, kh, kw = weight.shape
    if offsets.shape[1] != 2 * kh * kw:
        raise ConfigError(
            f"offset field has {offsets.shape[1]} channels, "
            f"expected {2 * kh * kw}"
        )
    ph, pw = kh // 2, kw // 2
    yy = torch.arange(h, dtype=inp.dtype, device=inp.device).view(1, h, 1)
    xx = torch.arange(w, dtype=inp.dtype, device=inp.device).view(1, 1, w)
    samples = []
    for di in range(kh):
        for dj in range(kw):
            tap = di * kw + dj
            sy = yy + (di - ph) + offsets[:, 2 * tap]
            sx = xx + (dj - pw) + offsets[:, 2 * tap + 1]
            samples.append(bilinear_sample(inp, sy, sx))
    stacked = torch.stack(samples, dim=1)            # [B,k*k,K,H,W]
    out = torch.einsum("bnchw,ocn->bohw", stacked,
                       weight.reshape(k_out, k_in, kh * kw))
    if bias is not None:
        out = out + bias.view(1, k_out, 1, 1)
    return out


class DeformConv2d(nn.Module):
    """One deformable layer: offset predictor conv + deformed main conv."""

    def __init__(self, cin: int, cout: int, kernel_size: int = 3):
        super().__init__()
        k = kernel_size
        self.offset = nn.Conv2d(cin, 2 * k * k, k, padding=k // 2)
        self.offset._zero_init = True  # start as a standard convolution
        self.main = nn.Conv2d(cin, cout, k, padding=k // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        offsets = self.offset(x)
        return deform_apply(x, offsets, self.main.weight, self.main.bias)


@dataclass(frozen=True)
class DeformBranchConfig:
    width: int = 32
    num_layers: int = 3
    kernel_size: int = 3

    def __post_init__(self):
        if self.width < 1 or self.num_layers < 1:
            raise ConfigError("width and num_layers must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be odd (same-size padding)")


class DeformBranch(nn.Module):
    """Stack of deformable layers plus a 1x1 category head.

    Unlike the sequence branch this one is built once and reused across
    decoder levels (it is fully convolutional, with no resolution-tied
    parameters), but per-level instances are what the full model constructs
    so the two branches stay symmetric in capacity accounting.
    """

    def __init__(self, cfg: DeformBranchConfig, num_categories: int):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = num_categories
        for _ in range(cfg.num_layers):
            layers.append(DeformConv2d(cin, cfg.width, cfg.kernel_size))
            cin = cfg.width
        self.layers = nn.ModuleList(layers)
        self.head = nn.Conv2d(cfg.width, num_categories, 1)

    def forward(self, masked_maps: torch.Tensor) -> torch.Tensor:
        x = masked_maps
        for layer in self.layers:
            x = F.leaky_relu(layer(x), LEAKY_SLOPE)
        return self.head(x)
