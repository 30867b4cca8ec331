"""Entropy-driven fine-tuning of a designated parameter subset.

The modulator backpropagates the mean prediction entropy (natural log,
nats) from the frozen classifier head down to a glob-selected set of
early-layer parameters and applies momentum-SGD steps.  The plasticity
layer's conv1 weights and the classifier head are never eligible: conv1
belongs to the Hebbian rule exclusively and the head stays frozen.

Selection globs use ``fnmatch`` semantics against parameter names
(``block1.*`` matches every block-1 weight and batch-norm affine;
``*.gamma``/``*.beta`` select all batch-norm affines, which is the TENT
configuration).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fnmatch import fnmatchcase

import numpy as np

from . import autodiff, source_model
from .errors import NonFiniteError, ParameterError
from .source_model import ModelCheckpoint

DEFAULT_SELECTION = ("block1.*", "block2.*")
BN_AFFINE_SELECTION = ("*.gamma", "*.beta")


def entropy_loss(logits: np.ndarray) -> float:
    """Mean Shannon entropy of softmax(logits); bounded by [0, ln C]."""
    from . import tensor_core as tc

    return float(tc.entropy(logits).mean())


def resolve_selection(globs, model: ModelCheckpoint) -> list[str]:
    """Expand selection globs to concrete parameter names, with guards."""
    names = list(model.params)
    selected = [n for n in names if any(fnmatchcase(n, g) for g in globs)]
    selected = [n for n in selected if n != "conv1.w" and not n.startswith("head.")]
    if not selected:
        raise ParameterError(f"selection {list(globs)!r} matches no eligible parameters")
    unmatched = [g for g in globs if not any(fnmatchcase(n, g) for n in names)]
    if unmatched:
        raise ParameterError(f"selection glob(s) {unmatched!r} match no checkpoint tensors")
    return selected


@dataclass
class ModulatorParamSet:
    """Trainable subset plus its optimizer state."""

    selection: tuple = DEFAULT_SELECTION
    lr: float = 1e-3
    momentum: float = 0.9
    steps_per_batch: int = 1
    _opt: autodiff.SgdMomentum | None = field(default=None, repr=False)

    def optimizer(self) -> autodiff.SgdMomentum:
        if self._opt is None:
            self._opt = autodiff.SgdMomentum(self.lr, self.momentum)
        return self._opt


def modulator_step(model: ModelCheckpoint, params: ModulatorParamSet, batch: np.ndarray) -> float:
    """Run steps_per_batch entropy-descent steps on the selection (in place).

    The forward uses current-batch normalization statistics.  On a
    non-finite loss or gradient the selected parameters and optimizer
    state are rolled back and the batch is aborted with a diagnostic.
    Returns the entropy measured at the last step's forward pass.
    """
    if batch.shape[0] < 2:
        raise ParameterError("modulator_step: batch-stats forward needs batch size >= 2")
    selected = resolve_selection(params.selection, model)
    opt = params.optimizer()
    backup = {n: model.params[n].copy() for n in selected}
    vel_backup = {n: v.copy() for n, v in opt.velocity.items()}
    loss_val = float("nan")
    try:
        for _ in range(max(1, params.steps_per_batch)):
            tape = autodiff.Tape()
            ops = autodiff.TapeOps(tape)
            lifted = {}
            for name, arr in model.params.items():
                lifted[name] = tape.watch(name, arr) if name in selected else tape.constant(arr)
            logits, _ = source_model.run_forward(
                ops, lifted, model.stats, model.desc, batch, "batch-stats"
            )
            loss = autodiff.entropy_loss(tape, logits)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise NonFiniteError(f"modulator_step: non-finite entropy loss {loss_val}")
            grads = tape.backward(loss)
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"modulator_step: non-finite gradient for {name}")
            if params.lr != 0.0:
                opt.step(model.params, grads)
    except NonFiniteError:
        for name, arr in backup.items():
            model.params[name] = arr
        opt.velocity = vel_backup
        raise
    return loss_val
