"""Direction-masked mutual distillation between the two refinement branches.

On every hard pixel the branch with the lower pixel cross-entropy acts as the
teacher for the other branch.  A binary direction matrix m records where the
sequence branch wins (m=1); the two loss terms are means of the same printed
KL(P_seq || P_deform) over the two pixel sets, with the teacher side detached
from the gradient graph per pixel set:

    loss_student_seq    = mean over hard, m=0 of KL(P_seq || sg[P_deform])
    loss_student_deform = mean over m=1 of KL(sg[P_seq] || P_deform)

An empty pixel set contributes 0.  Non-hard (hole) pixels never contribute.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from hardseg.errors import ConfigError
from hardseg.mining import HardMask

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DirectionMatrix:
    """Per-pixel distillation direction over the hard region.

    m=1 where the sequence branch is the more reliable (lower-CE) predictor;
    m=0 elsewhere, including every mined-out hole pixel.
    """

    m: np.ndarray
    hard: np.ndarray

    def __post_init__(self):
        m = (np.asarray(self.m) != 0).astype(np.uint8)
        hard = (np.asarray(self.hard) != 0).astype(np.uint8)
        if m.shape != hard.shape:
            raise ConfigError("direction and hard masks must share a shape")
        if (m & ~hard & 1).any():
            raise ConfigError("direction bit set outside the hard region")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "hard", hard)
        self.m.flags.writeable = False
        self.hard.flags.writeable = False

    @property
    def count_m(self) -> int:
        return int(self.m.sum())

    @property
    def count_g(self) -> int:
        return int(self.hard.size - self.hard.sum())


def pixel_ce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-pixel -log P[label] with a 1e-12 probability floor.

    probs [C,H,W], labels [H,W] int -> [H,W].
    """
    p_true = probs.gather(0, labels.unsqueeze(0)).squeeze(0)
    return -torch.log(p_true.clamp_min(PROB_FLOOR))


def kl_map(p_teacherless: torch.Tensor, p_other: torch.Tensor) -> torch.Tensor:
    """Per-pixel KL(P_A || P_B) of [C,H,W] maps, both sides floored at 1e-12.

    The 0 * log 0 convention comes from multiplying by the raw (unfloored)
    left probability, so all-zero hole vectors yield exactly 0.
    """
    log_ratio = torch.log(p_teacherless.clamp_min(PROB_FLOOR)) - torch.log(
        p_other.clamp_min(PROB_FLOOR)
    )
    return (p_teacherless * log_ratio).sum(dim=0)


def direction_matrix(ce_seq: np.ndarray, ce_deform: np.ndarray,
                     hard: HardMask) -> DirectionMatrix:
    """m = 1 on hard pixels where the sequence branch's CE is strictly lower."""
    ce_seq = np.asarray(ce_seq, dtype=np.float64)
    ce_deform = np.asarray(ce_deform, dtype=np.float64)
    if ce_seq.shape != hard.mask.shape or ce_deform.shape != hard.mask.shape:
        raise ConfigError("CE maps and hard mask must share a shape")
    m = (ce_seq < ce_deform) & (hard.mask != 0)
    return DirectionMatrix(m, hard.mask)


class DistillLosses(NamedTuple):
    student_seq: torch.Tensor      # trains the sequence branch (m=0 pixels)
    student_deform: torch.Tensor   # trains the deform branch (m=1 pixels)
    count_m: int
    count_keep: int                # hard pixels with m=0

    @property
    def total(self) -> torch.Tensor:
        return self.student_seq + self.student_deform


def hfd_losses(p_seq: torch.Tensor, p_deform: torch.Tensor,
               labels: torch.Tensor, hard: torch.Tensor) -> DistillLosses:
    """Both direction-masked distillation means for one sample.

    p_seq/p_deform [C,H,W] probability maps, labels [H,W] int, hard [H,W]
    bool.  The direction decision is made under no_grad; each loss term
    detaches its teacher, so gradient flows to exactly one branch per pixel.
    """
    with torch.no_grad():
        ce_seq = pixel_ce(p_seq, labels)
        ce_deform = pixel_ce(p_deform, labels)
        m = hard & (ce_seq < ce_deform)
        keep = hard & ~m
    n_m = int(m.sum())
    n_keep = int(keep.sum())
    zero = (p_seq.sum() + p_deform.sum()) * 0.0

    if n_keep:
        kl_keep = kl_map(p_seq, p_deform.detach())
        student_seq = (kl_keep * keep.to(kl_keep.dtype)).sum() / n_keep
    else:
        student_seq = zero
    if n_m:
        kl_dir = kl_map(p_seq.detach(), p_deform)
        student_deform = (kl_dir * m.to(kl_dir.dtype)).sum() / n_m
    else:
        student_deform = zero
    return DistillLosses(student_seq, student_deform, n_m, n_keep)
