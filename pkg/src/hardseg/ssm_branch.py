"""Sequence-model refinement branch.

The masked per-level probability map is cut into row-major patches, linearly
embedded (plus a learned positional table), and run through a stack of
bidirectional selective-scan blocks with multiplicative gating; a linear
un-embedding maps tokens back to per-pixel category logits at the original
resolution.

The forward and backward scans share one parameter set: the backward pass is
the same recurrence applied to the reversed sequence with its output
reversed, so reversing the input sequence exactly swaps (and reverses) the
two scan outputs — a property the tests pin.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from hardseg.errors import ConfigError


@dataclass(frozen=True)
class SSMBranchConfig:
    patch_size: tuple[int, int] = (4, 4)
    embed_dim: int = 64
    state_dim: int = 16
    num_blocks: int = 2

    def __post_init__(self):
        if min(self.patch_size) < 1 or self.embed_dim < 1 or self.state_dim < 1:
            raise ConfigError("patch size, embed dim, state dim must be >= 1")
        if self.num_blocks < 1:
            raise ConfigError("need at least one block")


class SelectiveScan(nn.Module):
    """Input-dependent linear recurrence over a token sequence.

    Per token t (with E channels and N states per channel):

        delta_t = softplus(W_delta x_t + b_delta)       [E]
        B_t = W_B x_t + b_B ;  C_t = W_C x_t + b_C      [N]
        h_t = exp(delta_t (x) A) * h_{t-1} + (delta_t (x) B_t) * x_t
        y_t = <C_t, h_t> per channel + D_skip * x_t

    with A = -exp(A_log) kept negative for stability, h_0 = 0.
    """

    def __init__(self, embed_dim: int, state_dim: int):
        super().__init__()
        self.proj_delta = nn.Linear(embed_dim, embed_dim)
        self.proj_b = nn.Linear(embed_dim, state_dim)
        self.proj_c = nn.Linear(embed_dim, state_dim)
        # deterministic (seed-free) init: states 1..N per channel, unit skip
        a_init = torch.arange(1, state_dim + 1, dtype=torch.float32)
        self.a_log = nn.Parameter(a_init.log().repeat(embed_dim, 1))
        self.d_skip = nn.Parameter(torch.ones(embed_dim))

    def forward(self, x: torch.Tensor, direction: str = "forward") -> torch.Tensor:
        """x: [L,E] or [B,L,E] -> same shape."""
        if direction == "backward":
            return self.forward(x.flip(-2), "forward").flip(-2)
        if direction != "forward":
            raise ConfigError(f"unknown scan direction {direction!r}")
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        delta = F.softplus(self.proj_delta(x))           # [B,L,E]
        b_t = self.proj_b(x)                             # [B,L,N]
        c_t = self.proj_c(x)                             # [B,L,N]
        a = -torch.exp(self.a_log)                       # [E,N]
        decay = torch.exp(delta.unsqueeze(-1) * a)       # [B,L,E,N]
        drive = (delta * x).unsqueeze(-1) * b_t.unsqueeze(-2)
        h = torch.zeros(x.shape[0], x.shape[2], self.a_log.shape[1],
                        dtype=x.dtype, device=x.device)
        outs = []
        for t in range(x.shape[1]):
            h = decay[:, t] * h + drive[:, t]
            outs.append((h * c_t[:, t].unsqueeze(-2)).sum(-1))
        y = torch.stack(outs, dim=1) + self.d_skip * x
        return y.squeeze(0) if squeeze else y


class SequenceBlock(nn.Module):
    """Pre-norm bidirectional scan block with multiplicative gating.

    out = S + LN(silu(z) * y_fwd + silu(z) * y_bwd), where x and z are two
    linear projections of LN(S) and both scan directions share parameters.
    The gate is applied to each direction separately, as printed, although
    it factors.
    """

    def __init__(self, embed_dim: int, state_dim: int):
        super().__init__()
        self.norm_in = nn.LayerNorm(embed_dim)
        self.proj_x = nn.Linear(embed_dim, embed_dim)
        self.proj_z = nn.Linear(embed_dim, embed_dim)
        self.scan = SelectiveScan(embed_dim, state_dim)
        self.norm_out = nn.LayerNorm(embed_dim)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        sn = self.norm_in(s)
        x = self.proj_x(sn)
        z = self.proj_z(sn)
        y_fwd = self.scan(x, "forward")
        y_bwd = self.scan(x, "backward")
        gate = F.silu(z)
        return s + self.norm_out(gate * y_fwd + gate * y_bwd)


class SSMBranch(nn.Module):
    """Patchify -> sequence blocks -> unpatchify to per-pixel logits.

    Built per decoder level: the positional table is tied to this level's
    token count.  Patch flattening is channel-major (index = c*Ph*Pw +
    py*Pw + px), patch order is a row-major raster over the patch grid, and
    un-embedding inverts the same layout.
    """

    def __init__(self, cfg: SSMBranchConfig, num_categories: int,
                 level_hw: tuple[int, int]):
        super().__init__()
        self.cfg = cfg
        self.num_categories = num_categories
        h, w = level_hw
        ph, pw = cfg.patch_size
        if h % ph or w % pw:
            raise ConfigError(
                f"patch {cfg.patch_size} does not divide level {level_hw}"
            )
        self.level_hw = (h, w)
        self.grid_hw = (h // ph, w // pw)
        self.tokens = self.grid_hw[0] * self.grid_hw[1]
        patch_dim = ph * pw * num_categories
        self.embed = nn.Linear(patch_dim, cfg.embed_dim)
        self.posemb = nn.Parameter(torch.zeros(self.tokens, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            SequenceBlock(cfg.embed_dim, cfg.state_dim)
            for _ in range(cfg.num_blocks)
        )
        self.unembed = nn.Linear(cfg.embed_dim, patch_dim)

    def patchify(self, maps: torch.Tensor) -> torch.Tensor:
        """[B,C,H,W] -> tokens [B,L,E] (embedding + positional table)."""
        b, c, h, w = maps.shape
        ph, pw = self.cfg.patch_size
        gh, gw = self.grid_hw
        patches = (
            maps.reshape(b, c, gh, ph, gw, pw)
            .permute(0, 2, 4, 1, 3, 5)          # [B,gh,gw,C,ph,pw]
            .reshape(b, self.tokens, c * ph * pw)
        )
        return self.embed(patches) + self.posemb

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        """[B,L,E] -> logits [B,C,H,W] via the inverse patch layout."""
        b = tokens.shape[0]
        c = self.num_categories
        ph, pw = self.cfg.patch_size
        gh, gw = self.grid_hw
        flat = self.unembed(tokens)              # [B,L,C*ph*pw]
        return (
            flat.reshape(b, gh, gw, c, ph, pw)
            .permute(0, 3, 1, 4, 2, 5)           # [B,C,gh,ph,gw,pw]
            .reshape(b, c, gh * ph, gw * pw)
        )

    def forward(self, masked_maps: torch.Tensor) -> torch.Tensor:
        """Masked per-level maps [B,C,H,W] -> refinement logits [B,C,H,W]."""
        if masked_maps.shape[-2:] != self.level_hw:
            raise ConfigError(
                f"branch built for {self.level_hw}, got {masked_maps.shape[-2:]}"
            )
        s = self.patchify(masked_maps)
        for block in self.blocks:
            s = block(s)
        return self.unpatchify(s)
