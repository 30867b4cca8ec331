"""Run configuration: flat JSON files with CLI-flag overrides.

Precedence, lowest to highest: built-in defaults, config file, command
line.  Every key has a default, so a config file plus flags fully
determines a run, and the effective merged config is echoed into every
artifact a run writes.
"""

from __future__ import annotations

import json
from pathlib import Path

from .corruption import CORRUPTION_KINDS
from .engine import HebbianConfig, MethodSpec, METHOD_NAMES, ModulatorConfig
from .errors import ConfigError
from .source_model import ArchitectureDescriptor, BlockSpec, Conv1Spec

DEFAULTS = {
    "seed": 0,
    "batch_size": 128,
    "out_dir": "runs/out",
    # dataset
    "dataset": "synthetic",          # synthetic | idx | container
    "dataset_path": "",
    "idx_images": "",
    "idx_labels": "",
    "classes": 10,
    "per_class": 500,                # training images per class
    "eval_per_class": 100,           # held-out clean split for accuracy
    "test_per_class": 200,           # adaptation stream size per class
    "image_size": 32,
    # architecture
    "conv1_filters": 32,
    "conv1_kernel": 3,
    "conv1_stride": 1,
    "conv1_padding": 1,
    "block_channels": "32,64,128,256",
    "block_pool": "2,2,2,2",
    # source training
    "epochs": 4,
    "lr": 0.05,
    "momentum": 0.9,
    "lr_decay_epochs": "",
    "lr_decay_factor": 0.1,
    # adaptation
    "checkpoint": "",
    "method": "nhl",
    "tau": 1.0,
    "eta": 0.001,
    "radius_mode": "source-norm",
    "radius_value": 1.0,
    "mod_selection": "block1.*,block2.*",
    "mod_lr": 0.001,
    "mod_momentum": 0.9,
    "mod_steps": 1,
    "corruption": "gaussian_noise:5",
    "episodic": False,
    "shuffle": True,
    "drop_last": False,
    "suite": "",                     # "" for single runs, or "paper-ablation"
    "seeds": "0,1,2",
    "figures": True,
    "save_checkpoint": False,
    # export-features
    "tap": "penultimate",
    "raw_maps": 8,
}

SUITE_METHODS = ("source", "norm", "tent", "hebbian", "nhl")


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: invalid JSON: {e}")
        unknown = sorted(set(file_cfg) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"config file {path}: unknown keys {unknown}")
        cfg.update(file_cfg)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if str(t).strip() != ""]


def parse_corruptions(text: str) -> list[tuple[str, int]]:
    """Parse 'kind:severity[,kind:severity...]'; 'none' means no corruption."""
    if text.strip() in ("", "none"):
        return []
    out = []
    for part in text.split(","):
        if ":" not in part:
            raise ConfigError(f"corruption {part!r}: expected 'kind:severity'")
        kind, sev = part.rsplit(":", 1)
        kind = kind.strip()
        if kind not in CORRUPTION_KINDS:
            raise ConfigError(f"corruption kind {kind!r}: expected one of {CORRUPTION_KINDS}")
        try:
            sev_i = int(sev)
        except ValueError:
            raise ConfigError(f"corruption severity {sev!r}: not an integer")
        if not 1 <= sev_i <= 5:
            raise ConfigError(f"corruption severity {sev_i}: must be 1..5")
        out.append((kind, sev_i))
    return out


def validate(cfg: dict, command: str) -> None:
    """Collect every invalid field before raising."""
    problems = []

    def check(cond, msg):
        if not cond:
            problems.append(msg)

    check(cfg["batch_size"] >= 2, f"batch_size: must be >= 2, got {cfg['batch_size']}")
    check(cfg["dataset"] in ("synthetic", "idx", "container"),
          f"dataset: unknown kind {cfg['dataset']!r}")
    if cfg["dataset"] == "idx":
        check(cfg["idx_images"] and cfg["idx_labels"],
              "idx_images/idx_labels: required for dataset=idx")
    if cfg["dataset"] == "container":
        check(bool(cfg["dataset_path"]), "dataset_path: required for dataset=container")
    if cfg["dataset"] == "synthetic":
        check(cfg["classes"] >= 2, f"classes: must be >= 2, got {cfg['classes']}")
        check(cfg["image_size"] >= 16, f"image_size: must be >= 16, got {cfg['image_size']}")
        check(cfg["per_class"] >= 1, f"per_class: must be >= 1, got {cfg['per_class']}")
    check(cfg["method"] in METHOD_NAMES, f"method: unknown {cfg['method']!r}")
    check(cfg["tau"] > 0, f"tau: must be > 0, got {cfg['tau']}")
    check(cfg["eta"] >= 0, f"eta: must be >= 0, got {cfg['eta']}")
    check(cfg["radius_mode"] in ("source-norm", "fixed"),
          f"radius_mode: unknown {cfg['radius_mode']!r}")
    check(cfg["mod_steps"] >= 1, f"mod_steps: must be >= 1, got {cfg['mod_steps']}")
    try:
        blocks = _int_list(cfg["block_channels"])
        pools = _int_list(cfg["block_pool"])
        check(len(blocks) == len(pools),
              "block_channels/block_pool: lists must have equal length")
        check(len(blocks) >= 0 and all(b >= 1 for b in blocks), "block_channels: invalid entry")
    except ValueError:
        problems.append("block_channels/block_pool: not integer lists")
    try:
        corr = parse_corruptions(cfg["corruption"])
        if command == "adapt" and cfg["suite"]:
            check(bool(corr), "corruption: suite runs need at least one corruption")
        if command in ("adapt", "eval") and not cfg["suite"]:
            check(len(corr) <= 1, "corruption: single runs take at most one corruption")
    except ConfigError as e:
        problems.append(str(e))
    if command in ("adapt", "eval", "export-features"):
        check(bool(cfg["checkpoint"]), "checkpoint: required for this command")
        if cfg["checkpoint"]:
            check(Path(cfg["checkpoint"]).exists(),
                  f"checkpoint: file not found: {cfg['checkpoint']}")
    if cfg["suite"]:
        check(cfg["suite"] == "paper-ablation", f"suite: unknown preset {cfg['suite']!r}")
        try:
            check(len(_int_list(cfg["seeds"])) >= 1, "seeds: need at least one seed")
        except ValueError:
            problems.append("seeds: not an integer list")
    check(cfg["tap"] in ("post_conv1", "penultimate"), f"tap: unknown {cfg['tap']!r}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


def descriptor_from_config(cfg: dict, in_channels: int | None = None,
                           image_size: int | None = None,
                           num_classes: int | None = None) -> ArchitectureDescriptor:
    """Descriptor from config; data-derived dims override the config ones."""
    channels = _int_list(cfg["block_channels"])
    pools = _int_list(cfg["block_pool"])
    desc = ArchitectureDescriptor(
        in_channels=3 if in_channels is None else in_channels,
        image_size=cfg["image_size"] if image_size is None else image_size,
        num_classes=cfg["classes"] if num_classes is None else num_classes,
        conv1=Conv1Spec(filters=cfg["conv1_filters"], kernel=cfg["conv1_kernel"],
                        stride=cfg["conv1_stride"], padding=cfg["conv1_padding"]),
        blocks=[BlockSpec(c, p) for c, p in zip(channels, pools)],
    )
    desc.validate()
    return desc


def method_from_config(cfg: dict, name: str | None = None) -> MethodSpec:
    heb = HebbianConfig(tau=cfg["tau"], eta=cfg["eta"], radius_mode=cfg["radius_mode"],
                        radius_value=cfg["radius_value"])
    selection = tuple(s.strip() for s in cfg["mod_selection"].split(",") if s.strip())
    mod = ModulatorConfig(selection=selection, lr=cfg["mod_lr"],
                          momentum=cfg["mod_momentum"], steps_per_batch=cfg["mod_steps"])
    return MethodSpec.make(name or cfg["method"], heb, mod)


def seeds_from_config(cfg: dict) -> list[int]:
    return _int_list(cfg["seeds"])
