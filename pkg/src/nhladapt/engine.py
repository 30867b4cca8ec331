"""Streaming test-time adaptation across methods.

Protocol per batch, in order: (a) Hebbian-family update of conv1 when the
method has one, (b) modulator entropy steps when the method has one,
(c) prediction with the just-updated model.  State carries over to the
next batch (continual adaptation); an ``episodic`` flag resets to the
source model before every batch for diagnostics.

Labels ride along for metrics only; adaptation consumes images
exclusively.  All adaptive methods normalize with current-batch
statistics; ``source`` uses the stored running statistics and changes
nothing.

Methods:
    source   frozen model, source statistics
    norm     batch statistics only
    tent     entropy descent on all batch-norm affines
    oja      classical Oja rule on conv1
    hebbian  soft-Hebbian rule on conv1
    nhl      soft-Hebbian conv1 + entropy-modulated early blocks
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from . import hebbian, modulator, source_model, tensor_core as tc
from .corruption import Batch, CorruptionSpec, DatasetHandle, corrupt, stream_batches
from .errors import NhlError, ParameterError
from .modulator import BN_AFFINE_SELECTION, DEFAULT_SELECTION, ModulatorParamSet
from .rng import Rng
from .source_model import ModelCheckpoint

METHOD_NAMES = ("source", "norm", "tent", "oja", "hebbian", "nhl")

REPORT_SCHEMA_VERSION = 1


@dataclass
class HebbianConfig:
    tau: float = 1.0
    eta: float = 1e-3
    radius_mode: str = "source-norm"
    radius_value: float = 1.0


@dataclass
class ModulatorConfig:
    selection: tuple = DEFAULT_SELECTION
    lr: float = 1e-3
    momentum: float = 0.9
    steps_per_batch: int = 1


@dataclass
class MethodSpec:
    """Adaptation method; which knobs exist is fixed by the name."""

    name: str
    hebbian: HebbianConfig | None = None
    modulator: ModulatorConfig | None = None

    @staticmethod
    def make(name: str, hebbian_cfg: HebbianConfig | None = None,
             modulator_cfg: ModulatorConfig | None = None) -> "MethodSpec":
        if name not in METHOD_NAMES:
            raise ParameterError(f"unknown method {name!r}; expected one of {METHOD_NAMES}")
        heb = hebbian_cfg or HebbianConfig()
        mod = modulator_cfg or ModulatorConfig()
        if name in ("source", "norm"):
            return MethodSpec(name)
        if name == "tent":
            mod = ModulatorConfig(selection=BN_AFFINE_SELECTION, lr=mod.lr,
                                  momentum=mod.momentum, steps_per_batch=mod.steps_per_batch)
            return MethodSpec(name, modulator=mod)
        if name in ("oja", "hebbian"):
            return MethodSpec(name, hebbian=heb)
        return MethodSpec(name, hebbian=heb, modulator=mod)

    def to_dict(self) -> dict:
        d: dict = {"name": self.name}
        if self.hebbian is not None:
            d["hebbian"] = vars(self.hebbian)
        if self.modulator is not None:
            m = vars(self.modulator).copy()
            m["selection"] = list(m["selection"])
            d["modulator"] = m
        return d


@dataclass
class AdaptationReport:
    config: dict
    per_batch: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    complete: bool = False
    error: str | None = None
    schema_version: int = REPORT_SCHEMA_VERSION
    code_version: str = ""
    final_model: ModelCheckpoint | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "code_version": self.code_version,
            "config": self.config,
            "complete": self.complete,
            "error": self.error,
            "per_batch": self.per_batch,
            "aggregate": self.aggregate,
        }


def _predict(model: ModelCheckpoint, images: np.ndarray, mode: str):
    logits, _ = source_model.forward(model, images, mode)
    return logits


def run_adaptation(model: ModelCheckpoint, method: MethodSpec, stream: list[Batch],
                   episodic: bool = False, trace_hook=None) -> AdaptationReport:
    """Run one adaptation stream; the input checkpoint is never mutated."""
    from . import __version__

    base = model.copy()
    work = model.copy()
    mode = "source-stats" if method.name == "source" else "batch-stats"
    desc = work.desc

    def fresh_plasticity(ckpt):
        if method.name in ("hebbian", "nhl"):
            return hebbian.init_from_source(
                ckpt.params["conv1.w"], method.hebbian.tau, method.hebbian.eta,
                method.hebbian.radius_mode, method.hebbian.radius_value)
        return None

    def fresh_modulator():
        if method.modulator is None:
            return None
        m = method.modulator
        return ModulatorParamSet(selection=tuple(m.selection), lr=m.lr,
                                 momentum=m.momentum, steps_per_batch=m.steps_per_batch)

    state = fresh_plasticity(work)
    param_set = fresh_modulator()

    report = AdaptationReport(
        config={"method": method.to_dict(), "episodic": episodic,
                "num_batches": len(stream)},
        code_version=__version__,
    )
    total_err_weight = 0.0
    total_weight = 0
    seen = 0
    try:
        for bi, batch in enumerate(stream):
            if episodic:
                work = base.copy()
                state = fresh_plasticity(work)
                param_set = fresh_modulator()
            step_loss = None
            if method.name == "oja":
                kernel = work.params["conv1.w"]
                hebbian.adapt_conv1_oja(kernel, batch.images, method.hebbian.eta,
                                        desc.conv1.stride, desc.conv1.padding)
                if trace_hook:
                    trace_hook("oja_update", bi, None)
            elif state is not None:
                hebbian.adapt_conv1(state, batch.images, desc.conv1.stride, desc.conv1.padding)
                work.params["conv1.w"] = state.kernel()
                if trace_hook:
                    trace_hook("hebbian_update", bi, None)
            if param_set is not None:
                step_loss = modulator.modulator_step(work, param_set, batch.images)
                if trace_hook:
                    trace_hook("modulator_step", bi, step_loss)
            logits = _predict(work, batch.images, mode)
            if trace_hook:
                trace_hook("predict", bi, logits)
            n = batch.images.shape[0]
            record = {
                "batch": bi,
                "size": n,
                "mean_entropy": float(tc.entropy(logits).mean()),
            }
            if state is not None:
                norms = state.filter_norms()
                record["conv1_norm"] = {
                    "min": float(norms.min()),
                    "mean": float(norms.mean()),
                    "max": float(norms.max()),
                    "mean_rel_dev": float(np.abs(norms / state.radius - 1.0).mean()),
                }
            if step_loss is not None:
                record["modulator_loss"] = step_loss
            preds = np.argmax(logits, axis=1)
            record["predictions_sha256"] = hashlib.sha256(preds.tobytes()).hexdigest()[:16]
            if batch.labels is not None:
                err = float((preds != batch.labels).mean())
                total_err_weight += err * n
                total_weight += n
                record["error"] = err
                record["cumulative_error"] = total_err_weight / total_weight
            report.per_batch.append(record)
            seen += 1
        report.complete = True
    except NhlError as e:
        report.error = f"batch {seen}: {e}"
        report.complete = False
    if total_weight:
        report.aggregate = {
            "top1_error_pct": 100.0 * total_err_weight / total_weight,
            "num_samples": total_weight,
        }
    else:
        report.aggregate = {"top1_error_pct": None, "num_samples": 0}
    report.final_model = work
    if state is not None:
        report.final_model.extras["hebbian.w"] = state.w.copy()
        report.final_model.extras["hebbian.R"] = state.radius.copy()
        report.final_model.meta["hebbian"] = {
            "tau": state.tau, "eta": state.eta, "update_count": state.update_count}
    return report


def batch_error_curve(report: AdaptationReport):
    """(batch index, cumulative mean error) series; flagged if incomplete."""
    series = [(r["batch"], r["cumulative_error"]) for r in report.per_batch
              if "cumulative_error" in r]
    return {"complete": report.complete, "series": series}


def corruption_seed(run_seed: int, kind: str, severity: int) -> int:
    """Stable per-(seed, corruption) stream id, shared across methods."""
    digest = hashlib.sha256(f"{run_seed}:{kind}:{severity}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class SuiteResult:
    rows: list = field(default_factory=list)          # dict rows for the CSV
    reports: dict = field(default_factory=dict)       # (method, kind, sev, seed) -> report
    failures: dict = field(default_factory=dict)      # same key -> message
    mean_by_method_corruption: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "corruption", "severity", "seed", "top1_error"])
        for r in self.rows:
            w.writerow([r["method"], r["corruption"], r["severity"], r["seed"],
                        "" if r["top1_error"] is None else f"{r['top1_error']:.4f}"])
        return buf.getvalue()


def run_ablation_suite(model: ModelCheckpoint, dataset: DatasetHandle,
                       corruptions: list[tuple[str, int]], methods: list[MethodSpec],
                       seeds: list[int], batch_size: int = 128,
                       episodic: bool = False, progress=None) -> SuiteResult:
    """Full (method x corruption x seed) cross-product of adaptation runs.

    The corrupted stream for a given (corruption, seed) is identical for
    every method.  Failed cells are recorded and the suite continues.
    """
    if not (corruptions and methods and seeds):
        raise ParameterError("suite: corruption, method, and seed lists must be nonempty")
    result = SuiteResult()
    for kind, severity in corruptions:
        for seed in seeds:
            spec = CorruptionSpec(kind, severity, seed=corruption_seed(seed, kind, severity))
            shifted = corrupt(dataset, spec)
            stream = stream_batches(shifted, batch_size,
                                    rng=Rng(seed).derive("shuffle", kind, severity),
                                    shuffle=True)
            for method in methods:
                key = (method.name, kind, severity, seed)
                if progress:
                    progress(key)
                report = run_adaptation(model, method, stream, episodic=episodic)
                result.reports[key] = report
                if not report.complete:
                    result.failures[key] = report.error or "incomplete"
                result.rows.append({
                    "method": method.name,
                    "corruption": kind,
                    "severity": severity,
                    "seed": seed,
                    "top1_error": report.aggregate.get("top1_error_pct"),
                })
    for (kind, severity) in corruptions:
        for method in methods:
            vals = [r["top1_error"] for r in result.rows
                    if r["method"] == method.name and r["corruption"] == kind
                    and r["severity"] == severity and r["top1_error"] is not None]
            if vals:
                result.mean_by_method_corruption[(method.name, kind, severity)] = float(np.mean(vals))
    return result
