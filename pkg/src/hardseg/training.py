"""Training loop: total objective, Nesterov SGD, schedule, checkpoints.

The total objective is

    loss = loss_primary + alpha * loss_branch + beta * loss_distill

where loss_branch sums both refinement branches' masked segmentation losses
over the active decoder levels and loss_distill sums the direction-masked
mutual KL terms.  With alpha = beta = 0 the branch pipeline is skipped
entirely, which makes the run bitwise identical to training the bare
backbone — all randomness is drawn from named substreams of the seed, so
skipping a consumer never shifts anyone else's stream.

Checkpoints are plain zip archives of raw little-endian float32 arrays plus
a JSON manifest; resume at an epoch boundary is bit-exact because the data
order and flip draws for epoch k depend only on (seed, k).
"""

from __future__ import annotations

import io
import json
import math
import os
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from hardseg.distill import hfd_losses
from hardseg.errors import CheckpointError, ConfigError, TrainingDiverged
from hardseg.grids import Sample
from hardseg.mining import apply_mask_torch, entropy_torch, hard_mask_torch
from hardseg.model import (HardRegionModel, ModelConfig, build_model,
                           check_level_indices)
from hardseg.seeding import substream
from hardseg.unet import seg_loss, softmax_probs

CSV_COLUMNS = ("step", "epoch", "lr", "loss_primary", "loss_ssm",
               "loss_deform", "loss_distill_ssm", "loss_distill_deform",
               "loss_total", "hard_pixels", "direction_pixels")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5           # weight of the branch segmentation losses
    beta: float = 0.1            # weight of the mutual distillation losses
    threshold: float = 0.001     # uncertainty threshold for hard-region mining
    lr: float = 0.001
    momentum: float = 0.99
    epochs: int = 300
    batch_size: int = 4
    levels_active: tuple[int, ...] = ()   # empty tuple = all decoder levels
    seed: int = 42
    level_supervision: bool = False  # also apply the primary loss per level
    augment_flips: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.threshold < 0:
            raise ConfigError("threshold must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels_active"] = list(self.levels_active)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["levels_active"] = tuple(d.get("levels_active", ()))
        return TrainConfig(**d)


def total_loss(loss_1, loss_2, loss_3, alpha: float, beta: float):
    """The weighted objective; plain arithmetic, shared by all callers."""
    return loss_1 + alpha * loss_2 + beta * loss_3


def lr_schedule(epoch: int, total_epochs: int, lr0: float) -> float:
    """Polynomial decay lr0 * (1 - epoch/total)^0.9."""
    frac = 1.0 - epoch / total_epochs
    return lr0 * frac**0.9 if frac > 0 else 0.0


class NesterovSGD:
    """v <- mu*v + g ;  p <- p - lr*(g + mu*v), per parameter."""

    def __init__(self, named_params: dict[str, torch.Tensor], momentum: float):
        self.params = dict(named_params)
        self.momentum = momentum
        self.velocity = {
            name: torch.zeros_like(p) for name, p in self.params.items()
        }

    @torch.no_grad()
    def step(self, lr: float) -> None:
        mu = self.momentum
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            v = self.velocity[name]
            v.mul_(mu).add_(g)
            p.add_(g + mu * v, alpha=-lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class StepLosses(NamedTuple):
    loss_primary: torch.Tensor
    loss_ssm: torch.Tensor
    loss_deform: torch.Tensor
    loss_distill_ssm: torch.Tensor
    loss_distill_deform: torch.Tensor
    total: torch.Tensor
    hard_pixels: int
    direction_pixels: int


def compute_losses(model: HardRegionModel, images: torch.Tensor,
                   labels: torch.Tensor, cfg: TrainConfig) -> StepLosses:
    """One batch forward through backbone, mining, branches, distillation.

    images [B,1,H,W] float32, labels [B,H,W] long.  Per-sample losses are
    averaged over the batch; per-level contributions are summed unweighted.
    When alpha = beta = 0 (or the model has no branches) the mining/branch
    path is skipped completely.
    """
    batch = images.shape[0]
    logits, feats = model.backbone(images)
    probs = softmax_probs(logits)
    zero = logits.sum() * 0.0

    loss_primary = zero
    for b in range(batch):
        term, _ = seg_loss(probs[b], labels[b])
        loss_primary = loss_primary + term
    loss_primary = loss_primary / batch

    loss_ssm = zero
    loss_deform = zero
    distill_ssm = zero
    distill_deform = zero
    hard_total = 0
    direction_total = 0

    run_branches = model.with_branches and (cfg.alpha > 0 or cfg.beta > 0)
    if run_branches:
        levels = check_level_indices(cfg.levels_active, model.num_levels)
        level_logits = model.backbone.level_logits(feats)
        for li in levels:
            y_level = softmax_probs(level_logits[li])        # [B,C,Hl,Wl]
            hl = y_level.shape[-2]
            factor = labels.shape[-2] // hl
            labels_level = labels[:, ::factor, ::factor]
            if cfg.level_supervision:
                for b in range(batch):
                    term, _ = seg_loss(y_level[b], labels_level[b])
                    loss_primary = loss_primary + term / batch

            u = entropy_torch(y_level)
            hard = hard_mask_torch(u, cfg.threshold)         # [B,Hl,Wl] bool
            if not bool(hard.any()):
                continue
            masked = apply_mask_torch(y_level, hard)
            p_seq = softmax_probs(model.ssm_branches[li](masked))
            p_def = softmax_probs(model.deform_branches[li](masked))
            for b in range(batch):
                if not bool(hard[b].any()):
                    continue
                l21, _ = seg_loss(p_seq[b], labels_level[b], hard[b])
                l22, _ = seg_loss(p_def[b], labels_level[b], hard[b])
                loss_ssm = loss_ssm + l21 / batch
                loss_deform = loss_deform + l22 / batch
                d = hfd_losses(p_seq[b], p_def[b], labels_level[b], hard[b])
                distill_ssm = distill_ssm + d.student_seq / batch
                distill_deform = distill_deform + d.student_deform / batch
                hard_total += int(hard[b].sum())
                direction_total += d.count_m

    loss_2 = loss_ssm + loss_deform
    loss_3 = distill_ssm + distill_deform
    total = total_loss(loss_primary, loss_2, loss_3, cfg.alpha, cfg.beta)
    return StepLosses(loss_primary, loss_ssm, loss_deform, distill_ssm,
                      distill_deform, total, hard_total, direction_total)


# --- data plumbing ---------------------------------------------------------


def samples_to_tensors(samples: list[Sample]):
    """Stack same-shaped 2D samples into [N,1,H,W] / [N,H,W] tensors."""
    shape = samples[0].image.shape
    for s in samples:
        if s.image.shape != shape:
            raise ConfigError(
                f"mixed sample shapes: {s.image.shape} vs {shape}"
            )
        if len(s.image.shape) != 2:
            raise ConfigError("training expects 2D slices")
    images = torch.from_numpy(
        np.stack([s.image.values for s in samples])[:, None].copy()
    )
    labels = torch.from_numpy(
        np.stack([s.labels.labels for s in samples]).astype(np.int64)
    )
    return images, labels


# --- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    model_config: dict
    train_config: dict
    epoch: int
    history: list = field(default_factory=list)


def snapshot(model: HardRegionModel, opt: NesterovSGD, tcfg: TrainConfig,
             epoch: int, history: list) -> Checkpoint:
    params = {
        name: p.detach().cpu().numpy().astype("<f4")
        for name, p in model.named_parameters()
    }
    momentum = {
        name: v.detach().cpu().numpy().astype("<f4")
        for name, v in opt.velocity.items()
    }
    return Checkpoint(params, momentum, model.cfg.to_dict(), tcfg.to_dict(),
                      epoch, list(history))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Zip of raw little-endian float32 arrays plus a JSON manifest."""
    path = Path(path)
    manifest = {
        "format": "hardseg-checkpoint",
        "version": 1,
        "epoch": ckpt.epoch,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "history": ckpt.history,
        "params": {k: list(v.shape) for k, v in ckpt.params.items()},
        "momentum": {k: list(v.shape) for k, v in ckpt.momentum.items()},
    }
    def entry(name: str) -> zipfile.ZipInfo:
        # fixed timestamp so identical runs produce identical bytes
        info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
        info.compress_type = zipfile.ZIP_DEFLATED
        return info

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(entry("manifest.json"),
                    json.dumps(manifest, indent=1, sort_keys=True))
        for name, arr in sorted(ckpt.params.items()):
            zf.writestr(entry(f"params/{name}.bin"), arr.astype("<f4").tobytes())
        for name, arr in sorted(ckpt.momentum.items()):
            zf.writestr(entry(f"momentum/{name}.bin"), arr.astype("<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (FileNotFoundError, zipfile.BadZipFile) as err:
        raise CheckpointError(f"{path}: not a readable checkpoint ({err})")
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path}: missing manifest.json")
        if manifest.get("format") != "hardseg-checkpoint":
            raise CheckpointError(f"{path}: unrecognized manifest format")

        def read_group(group: str) -> dict[str, np.ndarray]:
            out = {}
            for name, shape in manifest[group].items():
                member = f"{group}/{name}.bin"
                try:
                    raw = zf.read(member)
                except KeyError:
                    raise CheckpointError(f"{path}: missing member {member}")
                count = int(np.prod(shape)) if shape else 1
                if len(raw) != count * 4:
                    raise CheckpointError(
                        f"{path}: {member} holds {len(raw)} bytes, manifest "
                        f"shape {shape} needs {count * 4}"
                    )
                out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            return out

        return Checkpoint(
            params=read_group("params"),
            momentum=read_group("momentum"),
            model_config=manifest["model_config"],
            train_config=manifest["train_config"],
            epoch=int(manifest["epoch"]),
            history=list(manifest.get("history", [])),
        )


def restore_model(ckpt: Checkpoint) -> HardRegionModel:
    """Rebuild the model a checkpoint describes and load its parameters."""
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = HardRegionModel(cfg)
    model_names = {name for name, _ in model.named_parameters()}
    stored = set(ckpt.params)
    if model_names != stored:
        missing = sorted(model_names - stored)[:3]
        extra = sorted(stored - model_names)[:3]
        raise CheckpointError(
            f"parameter name mismatch (missing {missing}, unexpected {extra})"
        )
    with torch.no_grad():
        for name, p in model.named_parameters():
            arr = ckpt.params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"parameter {name}: stored shape {tuple(arr.shape)} != "
                    f"model shape {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr))
    return model


# --- the loop --------------------------------------------------------------


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvLogger:
    """Append-only per-step CSV; floats via repr so reruns byte-compare."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w")
            self._fh.write(",".join(CSV_COLUMNS) + "\n")
        else:
            self._fh = None

    def log(self, **kv) -> None:
        row = [_format_cell(kv[c]) for c in CSV_COLUMNS]
        self.rows.append(row)
        if self._fh:
            self._fh.write(",".join(row) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def train(model_cfg: ModelConfig, tcfg: TrainConfig, dataset: list[Sample],
          log_path=None, checkpoint_path=None, resume: Checkpoint | None = None,
          epoch_callback=None) -> tuple[HardRegionModel, Checkpoint]:
    """Run the full training loop; returns the model and final checkpoint.

    Deterministic given (configs, dataset, seed): shuffling and flip draws
    for epoch k come from substreams keyed by (seed, k), so a resumed run
    continues exactly where the interrupted one would have been.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    torch.use_deterministic_algorithms(True)
    images_all, labels_all = samples_to_tensors(dataset)
    n = images_all.shape[0]

    if resume is not None:
        model = restore_model(resume)
        if resume.train_config != tcfg.to_dict():
            raise CheckpointError(
                "resume requested with a different train config"
            )
        start_epoch = resume.epoch
        history = list(resume.history)
    else:
        model = build_model(model_cfg, tcfg.seed)
        start_epoch = 0
        history = []
    model.train()

    opt = NesterovSGD(dict(model.named_parameters()), tcfg.momentum)
    if resume is not None:
        for name, arr in resume.momentum.items():
            if name not in opt.velocity:
                raise CheckpointError(f"momentum buffer {name} not in model")
            opt.velocity[name] = torch.from_numpy(arr.copy())

    logger = CsvLogger(log_path)
    step = start_epoch * math.ceil(n / tcfg.batch_size)
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            lr = lr_schedule(epoch, tcfg.epochs, tcfg.lr)
            order = np.random.default_rng(
                substream(tcfg.seed, "shuffle", epoch)
            ).permutation(n)
            if tcfg.augment_flips:
                flip_bits = np.random.default_rng(
                    substream(tcfg.seed, "flips", epoch)
                ).random(n) < 0.5
            else:
                flip_bits = np.zeros(n, dtype=bool)

            epoch_total = 0.0
            batches = 0
            for lo in range(0, n, tcfg.batch_size):
                idx = order[lo:lo + tcfg.batch_size]
                images = images_all[idx].clone()
                labels = labels_all[idx].clone()
                flips = flip_bits[idx]
                if flips.any():
                    sel = torch.from_numpy(np.flatnonzero(flips))
                    images[sel] = images[sel].flip(-1)
                    labels[sel] = labels[sel].flip(-1)

                opt.zero_grad()
                losses = compute_losses(model, images, labels, tcfg)
                if not torch.isfinite(losses.total):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}: "
                        f"primary={losses.loss_primary.item()!r} "
                        f"branch=({losses.loss_ssm.item()!r}, "
                        f"{losses.loss_deform.item()!r}) "
                        f"distill=({losses.loss_distill_ssm.item()!r}, "
                        f"{losses.loss_distill_deform.item()!r})"
                    )
                losses.total.backward()
                opt.step(lr)

                logger.log(
                    step=step, epoch=epoch, lr=lr,
                    loss_primary=losses.loss_primary.item(),
                    loss_ssm=losses.loss_ssm.item(),
                    loss_deform=losses.loss_deform.item(),
                    loss_distill_ssm=losses.loss_distill_ssm.item(),
                    loss_distill_deform=losses.loss_distill_deform.item(),
                    loss_total=losses.total.item(),
                    hard_pixels=losses.hard_pixels,
                    direction_pixels=losses.direction_pixels,
                )
                epoch_total += losses.total.item()
                batches += 1
                step += 1

            history.append({"epoch": epoch,
                            "mean_total_loss": epoch_total / batches})
            if epoch_callback is not None:
                epoch_callback(model, epoch)
            if checkpoint_path is not None:
                save_checkpoint(
                    snapshot(model, opt, tcfg, epoch + 1, history),
                    checkpoint_path,
                )
    finally:
        logger.close()

    return model, snapshot(model, opt, tcfg, tcfg.epochs, history)
