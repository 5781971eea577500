"""TOML run configuration.

One file can drive every CLI subcommand.  Unknown keys are rejected (typos
should fail loudly, not silently fall back to defaults), every key has a
default, and command-line flags override file values.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from hardseg.deform_branch import DeformBranchConfig
from hardseg.errors import ConfigError
from hardseg.model import ModelConfig
from hardseg.phantom import PhantomSpec, default_spec
from hardseg.ssm_branch import SSMBranchConfig
from hardseg.training import TrainConfig
from hardseg.unet import UNetConfig

# section -> key -> default.  This table *is* the schema: anything not in it
# is an unknown key.
DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {
        "seed": 42,
        "out_dir": "runs/default",
        "jobs": 1,
        "checkpoint": "",   # consumed by evaluate/predict/sweep/export
        "input": "",        # single-volume input for predict/export
    },
    "data": {
        "dir": "data",
        "eval_dir": "",     # sweep evaluation set; empty = data.dir
        "count": 40,
        "image_size": [64, 64],
        "num_categories": 5,
        "noise_sigma": 0.15,
        "position_jitter": 0.03,
    },
    "model": {
        "depth": 4,
        "base_channels": 16,
        "with_branches": True,
    },
    "model.ssm": {
        "patch_size": [4, 4],
        "embed_dim": 64,
        "state_dim": 16,
        "num_blocks": 2,
    },
    "model.deform": {
        "width": 32,
        "num_layers": 3,
        "kernel_size": 3,
    },
    "train": {
        "alpha": 0.5,
        "beta": 0.1,
        "threshold": 0.001,
        "lr": 0.001,
        "momentum": 0.99,
        "epochs": 300,
        "batch_size": 4,
        "levels_active": [],
        "level_supervision": False,
        "augment_flips": True,
    },
    "sweep": {
        "thresholds": [0.1, 0.05, 0.01, 0.001, 0.0001],
        "retrain": True,
    },
}


def _flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            flat.update(_flatten(value, dotted))
        else:
            flat[dotted] = value
    return flat


def _schema_keys() -> set[str]:
    return {f"{sec}.{key}" for sec, keys in DEFAULTS.items() for key in keys}


def default_settings() -> dict[str, Any]:
    """Flat dotted-key -> default value map (copies lists)."""
    out: dict[str, Any] = {}
    for sec, keys in DEFAULTS.items():
        for key, val in keys.items():
            out[f"{sec}.{key}"] = list(val) if isinstance(val, list) else val
    return out


def _check_value(dotted: str, value: Any, default: Any) -> Any:
    """Light type coercion: ints may fill float slots, nothing else bends."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{dotted}' expects a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{dotted}' expects an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{dotted}' expects a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{dotted}' expects a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{dotted}' expects an array")
        return list(value)
    raise ConfigError(f"unhandled schema entry '{dotted}'")


def load_settings(path=None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Resolve defaults <- file <- overrides into a flat dotted-key map."""
    settings = default_settings()
    known = _schema_keys()
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                tree = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}")
        for dotted, value in _flatten(tree).items():
            if dotted not in known:
                raise ConfigError(f"unknown config key '{dotted}' in {path}")
            settings[dotted] = _check_value(dotted, value, settings[dotted])
    if overrides:
        for dotted, value in overrides.items():
            if dotted not in known:
                raise ConfigError(f"unknown override key '{dotted}'")
            if value is not None:
                settings[dotted] = _check_value(dotted, value, default_settings()[dotted])
    return settings


def _pair(dotted: str, value: list) -> tuple[int, int]:
    if len(value) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"config key '{dotted}' expects two integers")
    return (value[0], value[1])


def model_config(settings: dict[str, Any]) -> ModelConfig:
    size = _pair("data.image_size", settings["data.image_size"])
    unet = UNetConfig(
        depth=settings["model.depth"],
        base_channels=settings["model.base_channels"],
        num_categories=settings["data.num_categories"],
    )
    ssm = SSMBranchConfig(
        patch_size=_pair("model.ssm.patch_size", settings["model.ssm.patch_size"]),
        embed_dim=settings["model.ssm.embed_dim"],
        state_dim=settings["model.ssm.state_dim"],
        num_blocks=settings["model.ssm.num_blocks"],
    )
    deform = DeformBranchConfig(
        width=settings["model.deform.width"],
        num_layers=settings["model.deform.num_layers"],
        kernel_size=settings["model.deform.kernel_size"],
    )
    return ModelConfig(image_size=size, unet=unet, ssm=ssm, deform=deform,
                       with_branches=settings["model.with_branches"])


def train_config(settings: dict[str, Any]) -> TrainConfig:
    levels = settings["train.levels_active"]
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in levels):
        raise ConfigError("config key 'train.levels_active' expects integers")
    return TrainConfig(
        alpha=settings["train.alpha"],
        beta=settings["train.beta"],
        threshold=settings["train.threshold"],
        lr=settings["train.lr"],
        momentum=settings["train.momentum"],
        epochs=settings["train.epochs"],
        batch_size=settings["train.batch_size"],
        levels_active=tuple(levels),
        seed=settings["run.seed"],
        level_supervision=settings["train.level_supervision"],
        augment_flips=settings["train.augment_flips"],
    )


def phantom_spec(settings: dict[str, Any]) -> PhantomSpec:
    # go through default_spec so a reduced category count drops the organs
    # that no longer fit instead of failing validation
    return default_spec(
        num_categories=settings["data.num_categories"],
        noise_sigma=settings["data.noise_sigma"],
        position_jitter=settings["data.position_jitter"],
        image_size=_pair("data.image_size", settings["data.image_size"]),
    )


def sweep_thresholds(settings: dict[str, Any]) -> tuple[float, ...]:
    vals = settings["sweep.thresholds"]
    out = []
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError("config key 'sweep.thresholds' expects numbers")
        out.append(float(v))
    if not out:
        raise ConfigError("config key 'sweep.thresholds' must not be empty")
    return tuple(out)


def format_settings(settings: dict[str, Any]) -> str:
    """Stable one-key-per-line rendering used by the CLI banner."""
    lines = []
    for key in sorted(settings):
        lines.append(f"{key} = {settings[key]!r}")
    return "\n".join(lines)
