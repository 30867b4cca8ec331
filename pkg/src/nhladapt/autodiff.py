"""Reverse-mode gradient tape over the tensor primitives.

The tape records closures in execution order while the forward pass runs;
``backward`` replays them in reverse, accumulating gradients into watched
leaves.  Forward values are computed by the same :mod:`tensor_core`
functions the inference path uses, so tape and plain forwards agree
bit-for-bit.

A tape is valid for exactly one backward pass.  Gradients only flow where
needed: an op records nothing unless one of its inputs (transitively) is a
watched parameter, which is how the conv1 layer stays outside gradient
descent when it is not watched.
"""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .errors import UsageError


class Var:
    """A value on the tape; ``grad`` is populated by backward."""

    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value: np.ndarray, needs_grad: bool):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad


def _accum(var: Var, g: np.ndarray) -> None:
    if var.grad is None:
        var.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        var.grad += g


class Tape:
    def __init__(self):
        self._records = []
        self._watched: dict[str, Var] = {}
        self._consumed = False

    def watch(self, name: str, array: np.ndarray) -> Var:
        v = Var(array, needs_grad=True)
        self._watched[name] = v
        return v

    def constant(self, array: np.ndarray) -> Var:
        return Var(array, needs_grad=False)

    def _record(self, fn) -> None:
        self._records.append(fn)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Run the reverse pass from a scalar loss; one use per tape."""
        if self._consumed:
            raise UsageError("tape already consumed by a previous backward()")
        self._consumed = True
        loss.grad = np.asarray(1.0, dtype=np.asarray(loss.value).dtype)
        for fn in reversed(self._records):
            fn()
        out = {}
        for name, v in self._watched.items():
            out[name] = v.grad if v.grad is not None else np.zeros_like(v.value)
        return out


# -- tape ops -------------------------------------------------------------
# Each op computes its forward value eagerly via tensor_core and records a
# closure that routes the output gradient to inputs that need one.


def conv2d(tape: Tape, x: Var, w: Var, stride: int, padding: int) -> Var:
    value, cols = tc.conv2d_with_cols(x.value, w.value, stride, padding)
    out = Var(value, x.needs_grad or w.needs_grad)
    if not out.needs_grad:
        return out
    k = w.value.shape[0]
    w_mat = w.value.reshape(k, -1)
    x_shape, k_shape = x.value.shape, w.value.shape

    def bwd():
        if out.grad is None:
            return
        g = out.grad.transpose(0, 2, 3, 1).reshape(-1, k)  # (N*Ho*Wo) x K
        if w.needs_grad:
            _accum(w, (g.T @ cols).reshape(k_shape))
        if x.needs_grad:
            dcols = g @ w_mat
            _accum(x, tc.col2im(dcols, x_shape, k_shape[2], k_shape[3], stride, padding))

    tape._record(bwd)
    return out


def batchnorm(tape: Tape, x: Var, gamma: Var, beta: Var) -> Var:
    """Batch-statistics normalization; gradients flow through mu and var."""
    value, cache = tc.batchnorm_forward(x.value, gamma.value, beta.value)
    out = Var(value, x.needs_grad or gamma.needs_grad or beta.needs_grad)
    if not out.needs_grad:
        return out
    x_hat, inv_std, gamma_v, _, _ = cache
    m = x.value.shape[0] * x.value.shape[2] * x.value.shape[3]

    def bwd():
        if out.grad is None:
            return
        dy = out.grad
        if beta.needs_grad:
            _accum(beta, dy.sum(axis=(0, 2, 3)))
        if gamma.needs_grad:
            _accum(gamma, (dy * x_hat).sum(axis=(0, 2, 3)))
        if x.needs_grad:
            dxh = dy * gamma_v[None, :, None, None]
            s1 = dxh.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxh * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv_std[None, :, None, None] * (dxh - s1 / m - x_hat * (s2 / m))
            _accum(x, dx.astype(x.value.dtype, copy=False))

    tape._record(bwd)
    return out


def relu(tape: Tape, x: Var) -> Var:
    out = Var(tc.relu(x.value), x.needs_grad)
    if out.needs_grad:
        mask = x.value > 0

        def bwd():
            if out.grad is not None:
                _accum(x, out.grad * mask)

        tape._record(bwd)
    return out


def add(tape: Tape, a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, a.needs_grad or b.needs_grad)
    if out.needs_grad:

        def bwd():
            if out.grad is None:
                return
            if a.needs_grad:
                _accum(a, out.grad)
            if b.needs_grad:
                _accum(b, out.grad)

        tape._record(bwd)
    return out


def avgpool2d(tape: Tape, x: Var, k: int) -> Var:
    """Non-overlapping average pooling (stride == window)."""
    out = Var(tc.avgpool2d(x.value, k), x.needs_grad)
    if out.needs_grad:

        def bwd():
            if out.grad is None:
                return
            g = out.grad / (k * k)
            _accum(x, np.repeat(np.repeat(g, k, axis=2), k, axis=3))

        tape._record(bwd)
    return out


def global_avg_pool(tape: Tape, x: Var) -> Var:
    out = Var(tc.global_avg_pool(x.value), x.needs_grad)
    if out.needs_grad:
        _, _, h, w = x.value.shape

        def bwd():
            if out.grad is not None:
                _accum(x, np.broadcast_to(out.grad[:, :, None, None] / (h * w), x.value.shape))

        tape._record(bwd)
    return out


def linear(tape: Tape, x: Var, w: Var, b: Var) -> Var:
    out = Var(tc.linear(x.value, w.value, b.value), x.needs_grad or w.needs_grad or b.needs_grad)
    if out.needs_grad:

        def bwd():
            if out.grad is None:
                return
            g = out.grad
            if w.needs_grad:
                _accum(w, g.T @ x.value)
            if b.needs_grad:
                _accum(b, g.sum(axis=0))
            if x.needs_grad:
                _accum(x, g @ w.value)

        tape._record(bwd)
    return out


def cross_entropy_loss(tape: Tape, logits: Var, labels: np.ndarray) -> Var:
    """Fused softmax + NLL with the closed-form gradient (p - onehot)/N."""
    ls = tc.log_softmax(logits.value, axis=1)
    n = logits.value.shape[0]
    loss = -ls[np.arange(n), labels].mean()
    out = Var(np.asarray(loss, dtype=logits.value.dtype), logits.needs_grad)
    if out.needs_grad:
        p = np.exp(ls)

        def bwd():
            if out.grad is None:
                return
            d = p.copy()
            d[np.arange(n), labels] -= 1.0
            _accum(logits, d * (out.grad / n))

        tape._record(bwd)
    return out


def entropy_loss(tape: Tape, logits: Var) -> Var:
    """Mean Shannon entropy of softmax(logits), in nats.

    Fused with the closed-form gradient d/dz = -p * (log p + H_row) / N,
    which keeps the arithmetic order fixed and easy to mirror by hand.
    """
    ls = tc.log_softmax(logits.value, axis=1)
    p = np.exp(ls)
    h_rows = -(p * ls).sum(axis=1)
    out = Var(np.asarray(h_rows.mean(), dtype=logits.value.dtype), logits.needs_grad)
    if out.needs_grad:
        n = logits.value.shape[0]

        def bwd():
            if out.grad is None:
                return
            d = -p * (ls + h_rows[:, None])
            _accum(logits, d * (out.grad / n))

        tape._record(bwd)
    return out


class TapeOps:
    """Adapter exposing tape ops under the generic forward interface."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def lift(self, array):
        return self.tape.constant(array)

    def value(self, v: Var):
        return v.value

    def conv2d(self, x, w, stride, padding):
        return conv2d(self.tape, x, w, stride, padding)

    def batchnorm_batch(self, x, gamma, beta):
        out = batchnorm(self.tape, x, gamma, beta)
        # moments are re-derived cheaply for running-stat tracking
        mu = x.value.mean(axis=(0, 2, 3))
        var = x.value.var(axis=(0, 2, 3))
        return out, mu, var

    def batchnorm_running(self, x, gamma, beta, rm, rv):
        raise UsageError("gradient path supports batch-stats normalization only")

    def relu(self, x):
        return relu(self.tape, x)

    def add(self, a, b):
        return add(self.tape, a, b)

    def avgpool2d(self, x, k):
        return avgpool2d(self.tape, x, k)

    def global_avg_pool(self, x):
        return global_avg_pool(self.tape, x)

    def linear(self, x, w, b):
        return linear(self.tape, x, w, b)


class SgdMomentum:
    """Classic momentum SGD: v = mu*v + g; p -= lr*v."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(params[name])
                self.velocity[name] = v
            v *= self.momentum
            v += g
            params[name] -= self.lr * v
