"""Command-line entry points.

Commands: train-source, adapt, eval, export-features, make-dataset.
Each reads an optional flat-JSON config (--config) which individual flags
override; the effective merged config is echoed into every artifact.

Exit codes: 0 complete, 2 configuration error, 3 runtime abort (partial
artifacts are left in the output directory).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, engine, features, figures, source_model
from .checkpoint import Container, save_container
from .config import DEFAULTS, SUITE_METHODS
from .corruption import (CorruptionSpec, DatasetHandle, corrupt, load_dataset, load_idx,
                         make_synthetic_dataset, save_dataset, stream_batches)
from .engine import MethodSpec, batch_error_curve, corruption_seed, run_adaptation
from .errors import ConfigError, NhlError
from .rng import Rng


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _echo(cfg: dict) -> dict:
    return {"config": cfg, "code_version": __version__}


def _csv_with_echo(csv_text: str, cfg: dict) -> str:
    header = (f"# config: {json.dumps(cfg, sort_keys=True, separators=(',', ':'))}\n"
              f"# code_version: {__version__}\n")
    return header + csv_text


def _dataset(cfg: dict, split: str) -> DatasetHandle:
    """Materialize the configured dataset; synthetic splits use derived seeds."""
    if cfg["dataset"] == "idx":
        return load_idx(cfg["idx_images"], cfg["idx_labels"])
    if cfg["dataset"] == "container":
        return load_dataset(cfg["dataset_path"])
    per_split = {"train": cfg["per_class"], "eval": cfg["eval_per_class"],
                 "test": cfg["test_per_class"]}
    rng = Rng(cfg["seed"]).derive("data", split)
    return make_synthetic_dataset(cfg["classes"], per_split[split], cfg["image_size"], rng)


def _single_corruption(cfg: dict):
    specs = cfgmod.parse_corruptions(cfg["corruption"])
    return specs[0] if specs else None


def _corrupted_stream(cfg: dict, data: DatasetHandle):
    pair = _single_corruption(cfg)
    if pair is not None:
        kind, severity = pair
        spec = CorruptionSpec(kind, severity,
                              seed=corruption_seed(cfg["seed"], kind, severity))
        data = corrupt(data, spec)
    else:
        kind, severity = "none", 0
    stream = stream_batches(
        data, cfg["batch_size"],
        rng=Rng(cfg["seed"]).derive("shuffle", kind, severity),
        shuffle=cfg["shuffle"], drop_last=cfg["drop_last"])
    return data, stream, (kind, severity)


# -- commands -----------------------------------------------------------------


def cmd_train_source(cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train = _dataset(cfg, "train")
    if cfg["dataset"] == "synthetic":
        heldout = _dataset(cfg, "eval")
    else:
        heldout = train
    desc = cfgmod.descriptor_from_config(
        cfg, in_channels=train.images.shape[1], image_size=train.images.shape[2],
        num_classes=train.num_classes)
    model = source_model.build_model(desc, Rng(cfg["seed"]).derive("model-init"))
    log_lines = []
    trained = source_model.train_source(
        model, train.images, train.labels, epochs=cfg["epochs"], lr=cfg["lr"],
        rng=Rng(cfg["seed"]).derive("train"), momentum=cfg["momentum"],
        batch_size=cfg["batch_size"], eval_images=heldout.images, eval_labels=heldout.labels,
        lr_decay_epochs=tuple(int(e) for e in str(cfg["lr_decay_epochs"]).split(",") if e.strip()),
        lr_decay_factor=cfg["lr_decay_factor"],
        log_fn=lambda entry: log_lines.append(entry))
    trained.meta["config"] = cfg
    trained.meta["code_version"] = __version__
    ckpt_path = out / "checkpoint.ckpt"
    source_model.save_model(ckpt_path, trained)
    _write_json(out / "train_log.json", {
        **_echo(cfg),
        "epochs": log_lines,
        "source_accuracy": trained.meta.get("source_accuracy"),
        "checkpoint": str(ckpt_path),
    })
    acc = trained.meta.get("source_accuracy")
    print(f"train-source: wrote {ckpt_path} (clean accuracy "
          f"{'n/a' if acc is None else f'{acc:.3f}'})")
    return 0


def _run_single_adapt(cfg: dict, out: Path, artifact: str) -> int:
    model = source_model.load_model(cfg["checkpoint"])
    test = _dataset(cfg, "test")
    _, stream, (kind, severity) = _corrupted_stream(cfg, test)
    name = "source" if artifact == "eval" else cfg["method"]
    method = cfgmod.method_from_config(cfg, name)
    report = run_adaptation(model, method, stream, episodic=cfg["episodic"])
    report.config.update({"cli": cfg, "corruption": {"kind": kind, "severity": severity},
                          "seed": cfg["seed"]})
    _write_json(out / f"{artifact}.json", {**_echo(cfg), **report.to_dict()})
    rows = [{"method": name, "corruption": kind, "severity": severity,
             "seed": cfg["seed"], "top1_error": report.aggregate.get("top1_error_pct")}]
    suite_like = engine.SuiteResult(rows=rows)
    (out / f"{artifact}.csv").write_text(_csv_with_echo(suite_like.csv_text(), cfg))
    if cfg["figures"]:
        curve = batch_error_curve(report)
        figures.save_error_curves({name: curve["series"]}, out / f"{artifact}_error_curve.png")
    if cfg["save_checkpoint"] and report.final_model is not None:
        source_model.save_model(out / "adapted.ckpt", report.final_model)
    err = report.aggregate.get("top1_error_pct")
    status = "complete" if report.complete else f"ABORTED ({report.error})"
    print(f"{artifact}: method={name} corruption={kind}:{severity} "
          f"top1_error={'n/a' if err is None else f'{err:.2f}%'} [{status}]")
    return 0 if report.complete else 3


def cmd_adapt(cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if not cfg["suite"]:
        return _run_single_adapt(cfg, out, "report")
    model = source_model.load_model(cfg["checkpoint"])
    test = _dataset(cfg, "test")
    corruptions = cfgmod.parse_corruptions(cfg["corruption"])
    methods = [cfgmod.method_from_config(cfg, m) for m in SUITE_METHODS]
    seeds = cfgmod.seeds_from_config(cfg)
    result = engine.run_ablation_suite(model, test, corruptions, methods, seeds,
                                       batch_size=cfg["batch_size"], episodic=cfg["episodic"])
    reports_dir = out / "reports"
    reports_dir.mkdir(exist_ok=True)
    for (mname, kind, sev, seed), report in result.reports.items():
        path = reports_dir / f"{mname}_{kind}-{sev}_s{seed}.json"
        _write_json(path, {**_echo(cfg), **report.to_dict()})
    (out / "aggregate.csv").write_text(_csv_with_echo(result.csv_text(), cfg))
    if cfg["figures"]:
        figures.save_suite_summary(result.rows, out / "suite_summary.png")
        kind, sev = corruptions[0]
        curves = {}
        for mname in SUITE_METHODS:
            rep = result.reports.get((mname, kind, sev, seeds[0]))
            if rep is not None:
                curves[mname] = batch_error_curve(rep)["series"]
        figures.save_error_curves(curves, out / "error_curves.png")
    for key, msg in result.failures.items():
        print(f"adapt: cell {key} failed: {msg}")
    print(f"adapt: suite wrote {len(result.rows)} rows to {out / 'aggregate.csv'}")
    return 0 if not result.failures else 3


def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return _run_single_adapt(cfg, out, "eval")


def cmd_export_features(cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    model = source_model.load_model(cfg["checkpoint"])
    clean = _dataset(cfg, "test")
    shifted, stream, (kind, severity) = _corrupted_stream(cfg, clean)
    method = cfgmod.method_from_config(cfg)
    report = run_adaptation(model, method, stream, episodic=cfg["episodic"])
    if not report.complete:
        print(f"export-features: adaptation aborted: {report.error}")
        return 3
    adapted = report.final_model
    payload = {**_echo(cfg), "corruption": {"kind": kind, "severity": severity}, "taps": {}}
    for tap in features.TAPS:
        ranges = features.channel_ranges(model, clean.images, tap, "source-stats",
                                         cfg["batch_size"])
        sets = {
            "clean_source": features.feature_histograms(
                model, clean.images, tap, ranges, "source-stats", cfg["batch_size"]),
            "corrupted_source": features.feature_histograms(
                model, shifted.images, tap, ranges, "source-stats", cfg["batch_size"]),
            "corrupted_adapted": features.feature_histograms(
                adapted, shifted.images, tap, ranges, "batch-stats", cfg["batch_size"]),
        }
        payload["taps"][tap] = {
            "range_lo": ranges[0].tolist(),
            "range_hi": ranges[1].tolist(),
            "bins": features.NUM_BINS,
            "counts": {label: c.tolist() for label, c in sets.items()},
            "l1_to_clean": {
                "corrupted_source": features.histogram_l1(sets["corrupted_source"],
                                                          sets["clean_source"]),
                "corrupted_adapted": features.histogram_l1(sets["corrupted_adapted"],
                                                           sets["clean_source"]),
            },
        }
        if cfg["figures"]:
            figures.save_feature_histograms(sets, ranges, out / f"features_{tap}.png")
    _write_json(out / "features.json", payload)
    maps = features.collect_raw_maps(adapted, shifted.images, "post_conv1", "batch-stats",
                                     cfg["raw_maps"])
    save_container(out / "conv1_maps.bin", Container(
        kind="features",
        meta={"tap": "post_conv1", "count": int(maps.shape[0]), "config": cfg,
              "code_version": __version__},
        tensors=[("maps", "extra", maps.astype(np.float32))],
    ))
    print(f"export-features: wrote {out / 'features.json'}")
    return 0


def cmd_make_dataset(cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    data = _dataset(cfg, "train")
    path = out / "dataset.nhlds"
    save_dataset(path, data)
    _write_json(out / "dataset_meta.json", {
        **_echo(cfg),
        "images": list(data.images.shape),
        "num_classes": data.num_classes,
        "provenance": data.provenance,
        "path": str(path),
    })
    print(f"make-dataset: wrote {path} ({data.images.shape[0]} images)")
    return 0


# -- argument parsing ----------------------------------------------------------

_BOOL_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, bool)}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file; flags override its values")
    for key, default in DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        if key in _BOOL_KEYS:
            p.add_argument(flag, default=None, action=argparse.BooleanOptionalAction,
                           help=f"default: {default}")
        else:
            p.add_argument(flag, default=None, type=type(default),
                           help=f"default: {default!r}")


COMMANDS = {
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "export-features": cmd_export_features,
    "make-dataset": cmd_make_dataset,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nhladapt",
        description="Test-time adaptation experiments for small CNNs under corruption shift.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_config_flags(sub.add_parser(name, help=f"run {name}"))
    args = parser.parse_args(argv)
    overrides = {k: getattr(args, k) for k in DEFAULTS if hasattr(args, k)}
    try:
        cfg = cfgmod.load_config(args.config, overrides)
        cfgmod.validate(cfg, args.command)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg)
    except NhlError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
