"""Small residual CNN: architecture descriptor, init, forward, training.

The network is conv1 -> bn -> relu followed by residual blocks
(conv-bn-relu, conv-bn, skip, relu) and a global-average-pool + linear
head.  Downsampling happens through 2x2 average pooling at block entry so
every convolution keeps stride 1 and integral output sizes.  conv1 is the
single designated plasticity target; the head is the frozen classifier.

``forward`` runs in one of two normalization modes: ``source-stats`` uses
the running statistics stored at training time, ``batch-stats`` normalizes
with the current batch (minimum batch size 2).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, tensor_core as tc
from .checkpoint import Container, load_container, save_container
from .errors import CheckpointFormatError, DimensionError, NonFiniteError, ParameterError

EXTRA_PREFIX = "hebbian."


@dataclass
class Conv1Spec:
    filters: int = 32
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass
class BlockSpec:
    channels: int
    pool: int = 2  # average-pool factor applied at block entry; 1 = none


@dataclass
class ArchitectureDescriptor:
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    conv1: Conv1Spec = field(default_factory=Conv1Spec)
    blocks: list[BlockSpec] = field(
        default_factory=lambda: [BlockSpec(32), BlockSpec(64), BlockSpec(128), BlockSpec(256)]
    )

    def validate(self) -> None:
        if self.in_channels < 1 or self.num_classes < 2:
            raise ParameterError("descriptor: need in_channels >= 1 and num_classes >= 2")
        if self.conv1.filters < 1 or self.conv1.kernel < 1 or self.conv1.stride < 1:
            raise ParameterError("descriptor: invalid conv1 spec")
        size = self.image_size
        span = size + 2 * self.conv1.padding - self.conv1.kernel
        if span < 0 or span % self.conv1.stride != 0:
            raise ParameterError(f"descriptor: conv1 output size not integral for input {size}")
        size = span // self.conv1.stride + 1
        for i, blk in enumerate(self.blocks, 1):
            if blk.channels < 1 or blk.pool < 1:
                raise ParameterError(f"descriptor: invalid block {i}")
            if blk.pool > 1:
                if size % blk.pool != 0 or size // blk.pool < 1:
                    raise ParameterError(
                        f"descriptor: block {i} pool {blk.pool} does not divide size {size}"
                    )
                size //= blk.pool

    def feature_width(self) -> int:
        return self.blocks[-1].channels if self.blocks else self.conv1.filters

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "conv1": vars(self.conv1),
            "blocks": [vars(b) for b in self.blocks],
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchitectureDescriptor":
        return ArchitectureDescriptor(
            in_channels=d["in_channels"],
            image_size=d["image_size"],
            num_classes=d["num_classes"],
            conv1=Conv1Spec(**d["conv1"]),
            blocks=[BlockSpec(**b) for b in d["blocks"]],
        )


def param_shapes(desc: ArchitectureDescriptor) -> dict[str, tuple]:
    """Canonical parameter-name -> shape map; order is the storage order."""
    shapes: dict[str, tuple] = {}
    c1 = desc.conv1
    shapes["conv1.w"] = (c1.filters, desc.in_channels, c1.kernel, c1.kernel)
    shapes["bn1.gamma"] = (c1.filters,)
    shapes["bn1.beta"] = (c1.filters,)
    in_ch = c1.filters
    for i, blk in enumerate(desc.blocks, 1):
        p = f"block{i}"
        shapes[f"{p}.conv_a.w"] = (blk.channels, in_ch, 3, 3)
        shapes[f"{p}.bn_a.gamma"] = (blk.channels,)
        shapes[f"{p}.bn_a.beta"] = (blk.channels,)
        shapes[f"{p}.conv_b.w"] = (blk.channels, blk.channels, 3, 3)
        shapes[f"{p}.bn_b.gamma"] = (blk.channels,)
        shapes[f"{p}.bn_b.beta"] = (blk.channels,)
        if blk.channels != in_ch:
            shapes[f"{p}.conv_s.w"] = (blk.channels, in_ch, 1, 1)
            shapes[f"{p}.bn_s.gamma"] = (blk.channels,)
            shapes[f"{p}.bn_s.beta"] = (blk.channels,)
        in_ch = blk.channels
    shapes["head.w"] = (desc.num_classes, desc.feature_width())
    shapes["head.b"] = (desc.num_classes,)
    return shapes


def stat_shapes(desc: ArchitectureDescriptor) -> dict[str, tuple]:
    out = {}
    for name, shape in param_shapes(desc).items():
        if name.endswith(".gamma"):
            bn = name[: -len(".gamma")]
            out[f"{bn}.mean"] = shape
            out[f"{bn}.var"] = shape
    return out


def bn_names(desc: ArchitectureDescriptor) -> list[str]:
    return [n[: -len(".gamma")] for n in param_shapes(desc) if n.endswith(".gamma")]


@dataclass
class ModelCheckpoint:
    desc: ArchitectureDescriptor
    params: dict[str, np.ndarray]
    stats: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 1

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(
            desc=copy.deepcopy(self.desc),
            params={k: v.copy() for k, v in self.params.items()},
            stats={k: v.copy() for k, v in self.stats.items()},
            meta=copy.deepcopy(self.meta),
            extras={k: v.copy() for k, v in self.extras.items()},
            version=self.version,
        )


def build_model(desc: ArchitectureDescriptor, rng) -> ModelCheckpoint:
    """He fan-in init for conv/linear weights; identity batch-norm."""
    desc.validate()
    params = {}
    for name, shape in param_shapes(desc).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".beta") or name == "head.b":
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = rng.derive("init", name).normal(shape, scale=std)
    stats = {}
    for name, shape in stat_shapes(desc).items():
        stats[name] = (np.zeros if name.endswith(".mean") else np.ones)(shape, dtype=np.float32)
    return ModelCheckpoint(desc=desc, params=params, stats=stats, meta={"init_seed": rng.seed})


# -- forward --------------------------------------------------------------


class ArrayOps:
    """Plain-ndarray twin of autodiff.TapeOps for inference."""

    def lift(self, array):
        return array

    def value(self, x):
        return x

    def conv2d(self, x, w, stride, padding):
        return tc.conv2d(x, w, stride, padding)

    def batchnorm_batch(self, x, gamma, beta):
        y, cache = tc.batchnorm_forward(x, gamma, beta)
        return y, cache[3], cache[4]

    def batchnorm_running(self, x, gamma, beta, rm, rv):
        return tc.batchnorm_inference(x, gamma, beta, rm, rv)

    def relu(self, x):
        return tc.relu(x)

    def add(self, a, b):
        return a + b

    def avgpool2d(self, x, k):
        return tc.avgpool2d(x, k)

    def global_avg_pool(self, x):
        return tc.global_avg_pool(x)

    def linear(self, x, w, b):
        return tc.linear(x, w, b)


_ARRAY_OPS = ArrayOps()


def _bn(ops, h, params, stats, name, mode, moments):
    gamma, beta = params[f"{name}.gamma"], params[f"{name}.beta"]
    if mode == "batch-stats":
        out, mu, var = ops.batchnorm_batch(h, gamma, beta)
        if moments is not None:
            moments[name] = (mu, var)
        return out
    return ops.batchnorm_running(h, gamma, beta, stats[f"{name}.mean"], stats[f"{name}.var"])


def run_forward(ops, params, stats, desc: ArchitectureDescriptor, x: np.ndarray, mode: str,
                moments: dict | None = None):
    """Architecture forward generic over the op backend (arrays or tape)."""
    taps = {}
    h = ops.conv2d(ops.lift(x), params["conv1.w"], desc.conv1.stride, desc.conv1.padding)
    taps["post_conv1"] = ops.value(h)
    h = ops.relu(_bn(ops, h, params, stats, "bn1", mode, moments))
    in_ch = desc.conv1.filters
    for i, blk in enumerate(desc.blocks, 1):
        p = f"block{i}"
        if blk.pool > 1:
            h = ops.avgpool2d(h, blk.pool)
        a = ops.relu(_bn(ops, ops.conv2d(h, params[f"{p}.conv_a.w"], 1, 1), params, stats,
                         f"{p}.bn_a", mode, moments))
        b = _bn(ops, ops.conv2d(a, params[f"{p}.conv_b.w"], 1, 1), params, stats,
                f"{p}.bn_b", mode, moments)
        if blk.channels != in_ch:
            s = _bn(ops, ops.conv2d(h, params[f"{p}.conv_s.w"], 1, 0), params, stats,
                    f"{p}.bn_s", mode, moments)
        else:
            s = h
        h = ops.relu(ops.add(b, s))
        in_ch = blk.channels
    feat = ops.global_avg_pool(h)
    taps["penultimate"] = ops.value(feat)
    logits = ops.linear(feat, params["head.w"], params["head.b"])
    return logits, taps


def forward(model: ModelCheckpoint, batch: np.ndarray, mode: str = "source-stats",
            want_taps: bool = False):
    """Inference pass returning (logits, taps).

    taps holds the post-conv1 feature map and the penultimate (pooled)
    features; both are plain arrays.
    """
    if mode not in ("source-stats", "batch-stats"):
        raise ParameterError(f"forward: unknown mode {mode!r}")
    if batch.ndim != 4:
        raise DimensionError(f"forward: expected N x C x H x W batch, got {batch.shape}")
    if mode == "batch-stats" and batch.shape[0] < 2:
        raise DimensionError("forward: batch-stats mode needs batch size >= 2")
    logits, taps = run_forward(_ARRAY_OPS, model.params, model.stats, model.desc, batch, mode)
    return (logits, taps) if want_taps else (logits, {})


def evaluate(model: ModelCheckpoint, images: np.ndarray, labels: np.ndarray,
             mode: str = "source-stats", batch_size: int = 256) -> float:
    """Top-1 accuracy over a dataset; batches are straight slices."""
    n = images.shape[0]
    if n == 0:
        raise ParameterError("evaluate: empty dataset")
    correct = 0
    start = 0
    while start < n:
        stop = min(start + batch_size, n)
        if mode == "batch-stats" and n - stop == 1:
            stop = n  # absorb a trailing singleton, batch-stats needs >= 2
        logits, _ = forward(model, images[start:stop], mode)
        correct += int((np.argmax(logits, axis=1) == labels[start:stop]).sum())
        start = stop
    return correct / n


# -- supervised source training --------------------------------------------


def _update_running_stats(stats, moments, bn_momentum=0.1):
    # exponential moving average of the (biased) batch moments
    for name, (mu, var) in moments.items():
        stats[f"{name}.mean"] *= 1.0 - bn_momentum
        stats[f"{name}.mean"] += bn_momentum * mu.astype(np.float32)
        stats[f"{name}.var"] *= 1.0 - bn_momentum
        stats[f"{name}.var"] += bn_momentum * var.astype(np.float32)


def train_source(model: ModelCheckpoint, images: np.ndarray, labels: np.ndarray,
                 epochs: int, lr: float, rng, momentum: float = 0.9, batch_size: int = 128,
                 eval_images: np.ndarray | None = None, eval_labels: np.ndarray | None = None,
                 lr_decay_epochs: tuple = (), lr_decay_factor: float = 0.1,
                 log_fn=None) -> ModelCheckpoint:
    """Minibatch SGD with momentum on cross-entropy; returns a new checkpoint.

    epochs == 0 returns an untouched copy.  Running batch-norm statistics
    are tracked with momentum 0.1 (biased variance, matching the forward).
    A non-finite loss aborts with a diagnostic rather than being clipped.
    """
    if images.shape[0] == 0:
        raise ParameterError("train_source: empty dataset")
    out = model.copy()
    if epochs == 0:
        return out
    ckpt_params = out.params
    opt = autodiff.SgdMomentum(lr, momentum)
    train_log = []
    for epoch in range(epochs):
        if epoch in lr_decay_epochs:
            opt.lr *= lr_decay_factor
        order = rng.derive("epoch", epoch).permutation(images.shape[0])
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            xb, yb = images[idx], labels[idx]
            tape = autodiff.Tape()
            ops = autodiff.TapeOps(tape)
            watched = {name: tape.watch(name, arr) for name, arr in ckpt_params.items()}
            moments: dict = {}
            logits, _ = run_forward(ops, watched, out.stats, out.desc, xb, "batch-stats", moments)
            loss = autodiff.cross_entropy_loss(tape, logits, yb)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise NonFiniteError(
                    f"train_source: non-finite loss at epoch {epoch} batch {start // batch_size}"
                )
            grads = tape.backward(loss)
            opt.step(ckpt_params, grads)
            _update_running_stats(out.stats, moments)
            losses.append(loss_val)
        entry = {"epoch": epoch, "mean_loss": float(np.mean(losses))}
        train_log.append(entry)
        if log_fn:
            log_fn(entry)
    acc_images = eval_images if eval_images is not None else images
    acc_labels = eval_labels if eval_labels is not None else labels
    accuracy = evaluate(out, acc_images, acc_labels, mode="source-stats")
    out.meta.update(
        {
            "train_seed": rng.seed,
            "epochs": epochs,
            "lr": lr,
            "momentum": momentum,
            "source_accuracy": accuracy,
            "train_log": train_log,
        }
    )
    return out


# -- checkpoint file I/O ----------------------------------------------------


def save_model(path, model: ModelCheckpoint) -> None:
    shapes = param_shapes(model.desc)
    sshapes = stat_shapes(model.desc)
    tensors = [(name, "param", model.params[name]) for name in shapes]
    tensors += [(name, "stat", model.stats[name]) for name in sshapes]
    tensors += [(name, "extra", model.extras[name]) for name in sorted(model.extras)]
    save_container(
        path,
        Container(
            kind="model",
            descriptor=model.desc.to_dict(),
            meta=model.meta,
            tensors=tensors,
            version=model.version,
        ),
    )


def load_model(path) -> ModelCheckpoint:
    c = load_container(path)
    if c.kind != "model":
        raise CheckpointFormatError(f"{path}: container kind {c.kind!r}, expected 'model'")
    if c.descriptor is None:
        raise CheckpointFormatError(f"{path}: missing architecture descriptor")
    desc = ArchitectureDescriptor.from_dict(c.descriptor)
    desc.validate()
    shapes = param_shapes(desc)
    sshapes = stat_shapes(desc)
    params, stats, extras = {}, {}, {}
    for name, tkind, arr in c.tensors:
        if tkind == "param":
            target = shapes
            dest = params
        elif tkind == "stat":
            target = sshapes
            dest = stats
        elif name.startswith(EXTRA_PREFIX):
            extras[name] = arr.astype(np.float32)
            continue
        else:
            raise CheckpointFormatError(f"{path}: orphan tensor {name!r}")
        if name not in target:
            raise CheckpointFormatError(f"{path}: tensor {name!r} not named by the descriptor")
        if tuple(arr.shape) != target[name]:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} shape {arr.shape}, descriptor wants {target[name]}"
            )
        tc.check_finite(name, arr)
        dest[name] = arr.astype(np.float32)
    missing = (set(shapes) - set(params)) | (set(sshapes) - set(stats))
    if missing:
        raise CheckpointFormatError(f"{path}: missing tensors {sorted(missing)}")
    return ModelCheckpoint(desc=desc, params=params, stats=stats, meta=c.meta,
                           extras=extras, version=c.version)
