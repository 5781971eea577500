"""Full model: backbone plus per-decoder-level refinement branch pairs.

The backbone owns the primary prediction; each active decoder level gets its
own sequence-model branch (positional tables are resolution-specific) and its
own deformable branch.  Branches are training-time auxiliaries — inference
uses the backbone's final head alone — so a model built with
``with_branches=False`` is exactly the plain U-Net baseline, and seed
substreams keep its backbone initialization bit-identical to the full
model's.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from hardseg.deform_branch import DeformBranch, DeformBranchConfig
from hardseg.errors import ConfigError
from hardseg.seeding import substream
from hardseg.ssm_branch import SSMBranch, SSMBranchConfig
from hardseg.unet import UNet, UNetConfig, init_parameters


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    unet: UNetConfig = field(default_factory=UNetConfig)
    ssm: SSMBranchConfig = field(default_factory=SSMBranchConfig)
    deform: DeformBranchConfig = field(default_factory=DeformBranchConfig)
    with_branches: bool = True

    def __post_init__(self):
        self.unet.check_shape(*self.image_size)

    def level_sizes(self) -> list[tuple[int, int]]:
        """Decoder level resolutions, coarse -> fine (finest = input size)."""
        h, w = self.image_size
        return [
            (h // 2**i, w // 2**i)
            for i in range(self.unet.depth - 2, -1, -1)
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            image_size=tuple(d["image_size"]),
            unet=UNetConfig(**d["unet"]),
            ssm=SSMBranchConfig(**{**d["ssm"],
                                   "patch_size": tuple(d["ssm"]["patch_size"])}),
            deform=DeformBranchConfig(**d["deform"]),
            with_branches=bool(d["with_branches"]),
        )


class HardRegionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = UNet(cfg.unet)
        self.num_levels = cfg.unet.depth - 1
        if cfg.with_branches:
            c = cfg.unet.num_categories
            self.ssm_branches = nn.ModuleList(
                SSMBranch(cfg.ssm, c, hw) for hw in cfg.level_sizes()
            )
            self.deform_branches = nn.ModuleList(
                DeformBranch(cfg.deform, c) for _ in range(self.num_levels)
            )
        else:
            self.ssm_branches = None
            self.deform_branches = None

    @property
    def with_branches(self) -> bool:
        return self.ssm_branches is not None


def build_model(cfg: ModelConfig, seed: int) -> HardRegionModel:
    """Construct and deterministically initialize a model.

    Each component draws from its own named substream of the seed, so the
    backbone's initial weights do not depend on whether branches exist.
    """
    model = HardRegionModel(cfg)
    init_parameters(model.backbone, substream(seed, "backbone-init"))
    if model.with_branches:
        for i, branch in enumerate(model.ssm_branches):
            init_parameters(branch, substream(seed, "ssm-init", i))
        for i, branch in enumerate(model.deform_branches):
            init_parameters(branch, substream(seed, "deform-init", i))
    return model


@torch.no_grad()
def predict_labels(model: HardRegionModel, images: torch.Tensor) -> torch.Tensor:
    """Argmax prediction of the backbone's final head; [B,1,H,W] -> [B,H,W]."""
    model.eval()
    logits, _ = model.backbone(images)
    return logits.argmax(dim=1)


def check_level_indices(levels: tuple[int, ...], num_levels: int) -> tuple[int, ...]:
    """Validate/normalize a levels_active tuple; empty means every level."""
    if not levels:
        return tuple(range(num_levels))
    out = tuple(sorted(set(int(v) for v in levels)))
    for v in out:
        if not 0 <= v < num_levels:
            raise ConfigError(
                f"level index {v} out of range 0..{num_levels - 1}"
            )
    return out
