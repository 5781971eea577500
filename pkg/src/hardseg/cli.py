"""Command-line entry point.

Subcommands: generate-data, train, evaluate, predict, sweep-threshold,
export-uncertainty.  Every flag mirrors a TOML config key (flag overrides
file), the fully-resolved settings are printed at startup, and outputs are
written atomically.  Exit codes: 0 success, 1 user error, 2 internal error.
Set HARDSEG_NO_COLOR to disable ANSI output.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from hardseg import config as cfgmod
from hardseg.errors import (CheckpointError, ConfigError, NiftiParseError,
                            TrainingDiverged)
from hardseg.grids import IntensityGrid, LabelGrid
from hardseg.nifti import (load_dataset, load_volume, save_sample,
                           save_volume, volume_stem, _squeeze_depth1)
from hardseg.phantom import generate_dataset


def _color_on() -> bool:
    if os.environ.get("HARDSEG_NO_COLOR") is not None:
        return False
    return hasattr(sys.stdout, "isatty") and sys.stdout.isatty()


def _say(msg: str) -> None:
    if _color_on():
        print(f"\x1b[32m[hardseg]\x1b[0m {msg}")
    else:
        print(f"[hardseg] {msg}")


def _banner(command: str, settings: dict) -> None:
    _say(f"{command} — resolved settings:")
    text = cfgmod.format_settings(settings)
    if _color_on():
        text = "\n".join(f"\x1b[2m{line}\x1b[0m" for line in text.splitlines())
    print(text)


def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    top = _Parser(prog="hardseg",
                  description="Entropy-guided hard-region segmentation "
                              "pipeline (phantom data, training, metrics).")
    sub = top.add_subparsers(dest="command", metavar="COMMAND")

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="TOML", default=None,
                       help="TOML config file; flags override its values")
        p.add_argument("--seed", type=int, dest="run.seed", default=None,
                       help="master random seed [run.seed]")
        return p

    p = cmd("generate-data", "write a deterministic phantom dataset as "
                             "NIfTI image/label pairs")
    p.add_argument("--out", dest="data.dir", default=None,
                   help="output directory [data.dir]")
    p.add_argument("--count", type=int, dest="data.count", default=None,
                   help="number of samples [data.count]")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"),
                   dest="data.image_size", default=None,
                   help="grid size [data.image_size]")
    p.add_argument("--categories", type=int, dest="data.num_categories",
                   default=None, help="label categories incl. background "
                                      "[data.num_categories]")
    p.add_argument("--noise", type=float, dest="data.noise_sigma",
                   default=None, help="additive noise sigma [data.noise_sigma]")
    p.add_argument("--jitter", type=float, dest="data.position_jitter",
                   default=None,
                   help="organ position jitter [data.position_jitter]")

    p = cmd("train", "train on a directory of image/label pairs; writes "
                     "checkpoint.zip and train_log.csv")
    p.add_argument("--data", dest="data.dir", default=None,
                   help="training data directory [data.dir]")
    p.add_argument("--out", dest="run.out_dir", default=None,
                   help="run output directory [run.out_dir]")
    p.add_argument("--epochs", type=int, dest="train.epochs", default=None,
                   help="[train.epochs]")
    p.add_argument("--batch-size", type=int, dest="train.batch_size",
                   default=None, help="[train.batch_size]")
    p.add_argument("--lr", type=float, dest="train.lr", default=None,
                   help="initial learning rate [train.lr]")
    p.add_argument("--alpha", type=float, dest="train.alpha", default=None,
                   help="branch-loss weight [train.alpha]")
    p.add_argument("--beta", type=float, dest="train.beta", default=None,
                   help="distillation weight [train.beta]")
    p.add_argument("--threshold", type=float, dest="train.threshold",
                   default=None, help="uncertainty threshold [train.threshold]")
    p.add_argument("--levels", type=int, nargs="*", dest="train.levels_active",
                   default=None,
                   help="decoder levels to refine; empty = all "
                        "[train.levels_active]")
    p.add_argument("--level-supervision", action="store_const", const=True,
                   dest="train.level_supervision", default=None,
                   help="also supervise coarse heads [train.level_supervision]")
    p.add_argument("--no-flips", action="store_const", const=False,
                   dest="train.augment_flips", default=None,
                   help="disable flip augmentation [train.augment_flips]")
    p.add_argument("--no-branches", action="store_const", const=False,
                   dest="model.with_branches", default=None,
                   help="plain backbone baseline [model.with_branches]")

    p = cmd("evaluate", "per-case DSC/ASSD metrics for a checkpoint on a "
                        "dataset; writes metrics.csv")
    p.add_argument("--ckpt", dest="run.checkpoint", default=None,
                   help="checkpoint zip [run.checkpoint]")
    p.add_argument("--data", dest="data.dir", default=None,
                   help="evaluation data directory [data.dir]")
    p.add_argument("--out", dest="run.out_dir", default=None,
                   help="output directory [run.out_dir]")
    p.add_argument("--jobs", type=int, dest="run.jobs", default=None,
                   help="metric worker processes [run.jobs]")

    p = cmd("predict", "segment one volume; writes prediction NIfTI + "
                       "overlay PNG")
    p.add_argument("--ckpt", dest="run.checkpoint", default=None,
                   help="checkpoint zip [run.checkpoint]")
    p.add_argument("--input", dest="run.input", default=None,
                   help="input NIfTI volume [run.input]")
    p.add_argument("--out", dest="run.out_dir", default=None,
                   help="output directory [run.out_dir]")

    p = cmd("sweep-threshold", "mean DSC and hard-pixel fraction across "
                               "uncertainty thresholds; writes sweep.csv + "
                               "sweep.png")
    p.add_argument("--ckpt", dest="run.checkpoint", default=None,
                   help="base checkpoint providing configs [run.checkpoint]")
    p.add_argument("--data", dest="data.dir", default=None,
                   help="training data directory [data.dir]")
    p.add_argument("--eval-data", dest="data.eval_dir", default=None,
                   help="held-out evaluation directory [data.eval_dir]")
    p.add_argument("--thresholds", type=float, nargs="+",
                   dest="sweep.thresholds", default=None,
                   help="[sweep.thresholds]")
    p.add_argument("--no-retrain", action="store_const", const=False,
                   dest="sweep.retrain", default=None,
                   help="reuse the stored model instead of retraining per "
                        "threshold [sweep.retrain]")
    p.add_argument("--out", dest="run.out_dir", default=None,
                   help="output directory [run.out_dir]")

    p = cmd("export-uncertainty", "per-decoder-level uncertainty maps for "
                                  "one volume as NIfTI + grayscale PNG")
    p.add_argument("--ckpt", dest="run.checkpoint", default=None,
                   help="checkpoint zip [run.checkpoint]")
    p.add_argument("--input", dest="run.input", default=None,
                   help="input NIfTI volume [run.input]")
    p.add_argument("--out", dest="run.out_dir", default=None,
                   help="output directory [run.out_dir]")
    p.add_argument("--threshold", type=float, dest="train.threshold",
                   default=None,
                   help="threshold noted in the summary [train.threshold]")

    return top


def _settings_from_args(ns: argparse.Namespace) -> dict:
    overrides = {k: v for k, v in vars(ns).items()
                 if "." in k and v is not None}
    return cfgmod.load_settings(ns.config, overrides)


def _require(settings: dict, key: str, flag: str) -> str:
    value = settings[key]
    if not value:
        raise ConfigError(f"missing required {flag} (config key {key})")
    return value


def _load_checkpoint_model(settings: dict):
    from hardseg.training import load_checkpoint, restore_model

    ckpt = load_checkpoint(_require(settings, "run.checkpoint", "--ckpt"))
    return ckpt, restore_model(ckpt)


def _load_input_2d(settings: dict):
    path = Path(_require(settings, "run.input", "--input"))
    image, labels = load_volume(path)
    image, labels = _squeeze_depth1(image, labels)
    if image.values.ndim != 2:
        raise ConfigError(f"{path}: expected a 2D (or depth-1) volume")
    return path, image, labels


# --- subcommand bodies -----------------------------------------------------


def cmd_generate_data(settings: dict) -> int:
    spec = cfgmod.phantom_spec(settings)
    dataset = generate_dataset(spec, settings["data.count"],
                               settings["run.seed"])
    out = Path(settings["data.dir"])
    for sample in dataset:
        save_sample(sample, out / f"{sample.id}.nii.gz")
    _say(f"wrote {len(dataset)} image/label pairs to {out}")
    return 0


def cmd_train(settings: dict) -> int:
    from hardseg.training import save_checkpoint, train

    dataset = load_dataset(settings["data.dir"])
    # the data on disk, not the config, is authoritative for geometry
    shape = dataset[0].image.shape
    settings = dict(settings)
    settings["data.image_size"] = [shape[0], shape[1]]
    settings["data.num_categories"] = dataset[0].labels.num_categories
    mcfg = cfgmod.model_config(settings)
    tcfg = cfgmod.train_config(settings)

    out = Path(settings["run.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    ckpt_path = out / "checkpoint.zip"
    _say(f"training on {len(dataset)} samples for {tcfg.epochs} epochs "
         f"(alpha={tcfg.alpha:g}, beta={tcfg.beta:g}, T={tcfg.threshold:g})")
    model, ckpt = train(mcfg, tcfg, dataset,
                        log_path=log_path, checkpoint_path=ckpt_path)
    save_checkpoint(ckpt, ckpt_path)
    final = ckpt.history[-1]["mean_total_loss"] if ckpt.history else float("nan")
    _say(f"final mean loss {final:.6f}; checkpoint at {ckpt_path}, "
         f"log at {log_path}")
    return 0


def cmd_evaluate(settings: dict) -> int:
    from hardseg.metrics import (evaluate_model, format_report_table,
                                 mean_macro_dsc, report_csv_lines)

    _, model = _load_checkpoint_model(settings)
    dataset = load_dataset(settings["data.dir"])
    reports = evaluate_model(model, dataset, jobs=settings["run.jobs"])
    out = Path(settings["run.out_dir"]) / "metrics.csv"
    _write_text_atomic(out, "\n".join(report_csv_lines(reports)) + "\n")
    print(format_report_table(reports))
    _say(f"mean macro DSC {mean_macro_dsc(reports):.2f}% over "
         f"{len(reports)} cases; CSV at {out}")
    return 0


def cmd_predict(settings: dict) -> int:
    from hardseg.metrics import evaluate_case, format_report_table
    from hardseg.model import predict_labels
    from hardseg.viz import overlay_png

    ckpt, model = _load_checkpoint_model(settings)
    path, image, gt = _load_input_2d(settings)
    images = torch.from_numpy(image.values[None, None].astype(np.float32))
    pred = predict_labels(model, images)[0].numpy()
    pred_grid = LabelGrid(pred.astype(np.int64),
                          model.cfg.unet.num_categories)

    out = Path(settings["run.out_dir"])
    stem = volume_stem(path)
    nii_path = out / f"{stem}_pred.nii.gz"
    png_path = out / f"{stem}_overlay.png"
    save_volume(pred_grid, nii_path, spacing=image.spacing)
    overlay_png(image, pred_grid, png_path)
    if gt is not None:
        report = evaluate_case(pred_grid, gt, image.spacing, case_id=stem)
        print(format_report_table([report]))
    _say(f"prediction at {nii_path}, overlay at {png_path}")
    return 0


def cmd_sweep_threshold(settings: dict) -> int:
    from hardseg.metrics import sweep_csv_lines, threshold_sweep
    from hardseg.training import load_checkpoint
    from hardseg.viz import sweep_plot_png

    ckpt = load_checkpoint(_require(settings, "run.checkpoint", "--ckpt"))
    dataset = load_dataset(settings["data.dir"])
    eval_ds = (load_dataset(settings["data.eval_dir"])
               if settings["data.eval_dir"] else None)
    thresholds = cfgmod.sweep_thresholds(settings)
    retrain = settings["sweep.retrain"]
    rows = threshold_sweep(ckpt, dataset, thresholds, retrain=retrain,
                           eval_dataset=eval_ds, log=_say)
    out = Path(settings["run.out_dir"])
    csv_path = out / "sweep.csv"
    png_path = out / "sweep.png"
    _write_text_atomic(csv_path,
                       "\n".join(sweep_csv_lines(rows, retrain)) + "\n")
    sweep_plot_png(rows, png_path)
    best = max(rows, key=lambda r: r.mean_dsc_pct)
    _say(f"best threshold {best.threshold:g} "
         f"(mean DSC {best.mean_dsc_pct:.2f}%); table at {csv_path}, "
         f"plot at {png_path}")
    return 0


def cmd_export_uncertainty(settings: dict) -> int:
    from hardseg.grids import ProbGrid
    from hardseg.mining import binarize, uncertainty_map
    from hardseg.unet import softmax_probs
    from hardseg.viz import heatmap_png

    _, model = _load_checkpoint_model(settings)
    path, image, _ = _load_input_2d(settings)
    images = torch.from_numpy(image.values[None, None].astype(np.float32))
    out = Path(settings["run.out_dir"])
    stem = volume_stem(path)
    threshold = settings["train.threshold"]

    model.eval()
    with torch.no_grad():
        _, feats = model.backbone(images)
        for li in range(model.num_levels):
            probs = softmax_probs(model.backbone.level_heads[li](feats[li]))
            u = uncertainty_map(ProbGrid(probs[0].numpy().astype(np.float64)))
            factor = image.values.shape[0] // u.values.shape[0]
            level_spacing = tuple(s * factor for s in image.spacing)
            grid = IntensityGrid(u.values.astype(np.float32), level_spacing)
            save_volume(grid, out / f"{stem}_uncertainty_level{li}.nii.gz")
            heatmap_png(u, out / f"{stem}_uncertainty_level{li}.png")
            hard = binarize(u, threshold)
            _say(f"level {li}: {u.values.shape[0]}x{u.values.shape[1]}, "
                 f"{hard.count} hard pixels at T={threshold:g}")
    _say(f"wrote {model.num_levels} uncertainty maps to {out}")
    return 0


_COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "sweep-threshold": cmd_sweep_threshold,
    "export-uncertainty": cmd_export_uncertainty,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_usage(sys.stderr)
            return 1
        settings = _settings_from_args(ns)
        _banner(ns.command, settings)
        torch.manual_seed(settings["run.seed"])
        return _COMMANDS[ns.command](settings)
    except SystemExit as exc:  # argparse --help (0) or usage error (1)
        code = exc.code
        return code if isinstance(code, int) else 1
    except (ConfigError, NiftiParseError, CheckpointError, TrainingDiverged,
            FileNotFoundError, NotADirectoryError) as exc:
        sys.stderr.write(f"hardseg: error: {exc}\n")
        return 1
    except Exception:
        sys.stderr.write("hardseg: internal error\n")
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
