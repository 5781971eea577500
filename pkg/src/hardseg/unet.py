"""U-Net backbone: encoder/decoder, per-level probability heads, seg loss.

The backbone produces the primary prediction and, for each decoder level
(coarse to fine), a feature map that a 1x1 head turns into a per-level
probability map.  Those per-level maps are what the uncertainty mining
consumes; the final head alone defines the primary loss by default.

Initialization is done manually from an explicit torch.Generator (Kaiming-
uniform fan-in, zero biases) so that runs are reproducible bit-for-bit from
the seed, independent of torch's global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from hardseg.errors import ConfigError

LEAKY_SLOPE = 0.01
PROB_FLOOR = 1e-12
DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    num_categories: int = 5
    in_channels: int = 1
    kernel_size: int = 3
    norm: str = "instance"      # recorded so tests can pin the choice
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.num_categories < 2:
            raise ConfigError("num_categories must be >= 2")
        if self.norm != "instance" or self.activation != "leaky_relu":
            raise ConfigError("only instance norm + leaky_relu are implemented")

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def check_shape(self, h: int, w: int) -> None:
        if h % self.divisor or w % self.divisor:
            raise ConfigError(
                f"input {h}x{w} not divisible by 2^(depth-1) = {self.divisor}"
            )


class DoubleConv(nn.Module):
    """(conv3x3 -> instance norm -> leaky relu) twice."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(cout, affine=True)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(cout, affine=True)

    def forward(self, x):
        x = F.leaky_relu(self.norm1(self.conv1(x)), LEAKY_SLOPE)
        x = F.leaky_relu(self.norm2(self.conv2(x)), LEAKY_SLOPE)
        return x


class UNet(nn.Module):
    """Plain 2D U-Net with per-decoder-level 1x1 probability heads.

    Decoder features are returned coarse -> fine; the finest matches the
    input resolution.  Skip connections are concatenated as
    [skip, upsampled] (pinned; the recomposition tests rely on it).
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.enc = nn.ModuleList()
        cin = cfg.in_channels
        for c in chans:
            self.enc.append(DoubleConv(cin, c))
            cin = c
        self.dec = nn.ModuleList()
        for i in range(cfg.depth - 2, -1, -1):  # coarse -> fine
            self.dec.append(DoubleConv(chans[i] + chans[i + 1], chans[i]))
        self.level_heads = nn.ModuleList(
            nn.Conv2d(chans[i], cfg.num_categories, 1)
            for i in range(cfg.depth - 2, -1, -1)
        )
        self.final_head = nn.Conv2d(chans[0], cfg.num_categories, 1)

    def forward(self, x: torch.Tensor):
        """x: [B, in_channels, H, W] -> (final_logits, features coarse->fine)."""
        self.cfg.check_shape(x.shape[-2], x.shape[-1])
        skips = []
        for i, block in enumerate(self.enc):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        feats = []
        for i, block in enumerate(self.dec):
            skip = skips[self.cfg.depth - 2 - i]
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([skip, x], dim=1))
            feats.append(x)
        return self.final_head(x), feats

    def level_logits(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        return [head(f) for head, f in zip(self.level_heads, feats)]


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic manual init from an explicit generator.

    Conv/linear weights: Kaiming-uniform with fan-in and the leaky-relu gain;
    biases zero; norm scales one, shifts zero.  Zero-init markers (modules
    with ``_zero_init`` set, e.g. offset predictors) are zeroed outright.
    Iteration follows named_parameters order, which is fixed by construction
    order, so the draw sequence is stable.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, mod in module.named_modules():
        if getattr(mod, "_zero_init", False):
            for p in mod.parameters(recurse=False):
                with torch.no_grad():
                    p.zero_()
            continue
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            weight = mod.weight
            fan_in = weight.shape[1:].numel()
            gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
            bound = gain * math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                weight.uniform_(-bound, bound, generator=gen)
                if mod.bias is not None:
                    mod.bias.zero_()
        elif isinstance(mod, (nn.InstanceNorm2d, nn.LayerNorm)):
            with torch.no_grad():
                if mod.weight is not None:
                    mod.weight.fill_(1.0)
                if mod.bias is not None:
                    mod.bias.zero_()


class ParameterStore:
    """Named view over a module tree's parameters and gradient slots."""

    def __init__(self, module: nn.Module):
        self._module = module
        self._params = dict(module.named_parameters())

    def names(self) -> list[str]:
        return list(self._params)

    def shape(self, name: str) -> tuple[int, ...]:
        return tuple(self._params[name].shape)

    def array(self, name: str) -> np.ndarray:
        return self._params[name].detach().cpu().numpy().astype(np.float32)

    def grad(self, name: str) -> np.ndarray | None:
        g = self._params[name].grad
        return None if g is None else g.detach().cpu().numpy().astype(np.float32)

    def load(self, name: str, values: np.ndarray) -> None:
        p = self._params[name]
        arr = np.asarray(values, dtype=np.float32)
        if tuple(arr.shape) != tuple(p.shape):
            raise ConfigError(
                f"parameter {name}: stored shape {arr.shape} != model "
                f"shape {tuple(p.shape)}"
            )
        with torch.no_grad():
            p.copy_(torch.from_numpy(arr))


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    """Channel softmax of [..., C, H, W] logits."""
    return torch.softmax(logits, dim=-3)


def seg_loss(probs: torch.Tensor, labels: torch.Tensor,
             include_mask: torch.Tensor | None = None):
    """0.5 * cross-entropy + 0.5 * soft Dice over included pixels.

    probs [C,H,W], labels [H,W] int, include_mask [H,W] bool/0-1 or None for
    all pixels.  Dice is per foreground category (1..C-1), smoothing 1e-5 in
    numerator and denominator, then averaged.  Returns (loss, empty) where
    empty flags an include_mask selecting nothing; the loss is then 0 (and
    still connected to the graph so callers can backprop unconditionally).
    """
    c = probs.shape[0]
    if include_mask is None:
        include = torch.ones_like(labels, dtype=probs.dtype)
    else:
        include = include_mask.to(probs.dtype)
    n_inc = include.sum()
    if n_inc.item() == 0:
        return probs.sum() * 0.0, True

    p_true = probs.gather(0, labels.unsqueeze(0)).squeeze(0)
    ce = -(torch.log(p_true.clamp_min(PROB_FLOOR)) * include).sum() / n_inc

    dice_sum = probs.sum() * 0.0
    for k in range(1, c):
        g = (labels == k).to(probs.dtype) * include
        p = probs[k] * include
        inter = (p * g).sum()
        dice_sum = dice_sum + (2.0 * inter + DICE_SMOOTH) / (
            p.sum() + g.sum() + DICE_SMOOTH
        )
    dice_loss = 1.0 - dice_sum / (c - 1)
    return 0.5 * ce + 0.5 * dice_loss, False
