"""Shifted test streams: synthetic shape data, IDX loading, corruptions.

Severity tables below are documented constants chosen to be strictly
monotone in their noise/blur magnitude.  They approximate the spirit of
the common corruption benchmarks, not their exact kernels; frost/fog-style
texture corruptions that need external assets are not included.

Per-image randomness is derived as ``Rng(seed).derive("corrupt", kind,
severity, image_index)`` so corruption can be parallelized per image
without changing results.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Container, load_container, save_container
from .errors import DataFormatError, ParameterError
from .rng import Rng

# severity index 1..5 maps to entry 0..4
GAUSSIAN_SIGMA = (0.08, 0.12, 0.18, 0.26, 0.38)      # stddev of additive noise
SHOT_PHOTONS = (60.0, 25.0, 12.0, 5.0, 3.0)           # photon budget; magnitude is 1/value
IMPULSE_FRACTION = (0.03, 0.06, 0.09, 0.17, 0.27)     # salt/pepper pixel fraction
DEFOCUS_RADIUS = (0.8, 1.2, 1.7, 2.3, 3.0)            # disk kernel radius, px
MOTION_LENGTH = (3, 5, 7, 9, 11)                      # line kernel length, px
CONTRAST_FACTOR = (0.75, 0.6, 0.45, 0.3, 0.15)        # magnitude is 1 - value
BRIGHTNESS_SHIFT = (0.10, 0.18, 0.26, 0.34, 0.42)     # additive shift
PIXELATE_BLOCK = (2, 3, 4, 6, 8)                      # averaging block size, px
JPEG_LEVELS = (24, 16, 10, 7, 5)                      # per-8x8-block levels; magnitude 1/value

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "contrast",
    "brightness",
    "pixelate",
    "jpeg",
)


@dataclass
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ParameterError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ParameterError(f"severity must be 1..5, got {self.severity}")


@dataclass
class DatasetHandle:
    images: np.ndarray       # N x C x H x W float32 in [0, 1]
    labels: np.ndarray       # N int64 class ids
    num_classes: int
    provenance: str          # synthetic | idx-file | container

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"dataset: images {self.images.shape} vs labels {self.labels.shape}"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("dataset: pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError("dataset: label outside [0, num_classes)")


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray | None
    indices: np.ndarray


# -- synthetic shape classes -------------------------------------------------


def _shape_mask(class_id: int, size: int, r: Rng) -> np.ndarray:
    """Anti-aliased mask in [0,1] for one of ten parametric glyphs."""
    cx, cy = r.uniform(-0.16, 0.16, 2)
    scale = float(r.uniform(0.55, 0.8, ()))
    rot = float(r.uniform(-0.22, 0.22, ()))
    lin = np.linspace(-1.0, 1.0, size, dtype=np.float64)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    x = (xx - cx) * np.cos(rot) + (yy - cy) * np.sin(rot)
    y = -(xx - cx) * np.sin(rot) + (yy - cy) * np.cos(rot)
    aa = 1.6 / size

    def soft(d):  # d > 0 inside
        return np.clip(d / aa + 0.5, 0.0, 1.0)

    rad = np.sqrt(x * x + y * y)
    k = class_id % 10
    if k == 0:    # disk
        m = soft(scale * 0.8 - rad)
    elif k == 1:  # ring
        m = soft(0.22 * scale - np.abs(rad - 0.62 * scale))
    elif k == 2:  # filled square
        m = soft(scale * 0.68 - np.maximum(np.abs(x), np.abs(y)))
    elif k == 3:  # square frame
        m = soft(0.2 * scale - np.abs(np.maximum(np.abs(x), np.abs(y)) - 0.6 * scale))
    elif k == 4:  # triangle (upward)
        d = np.minimum(y + 0.55 * scale, np.minimum(0.62 * scale - (1.9 * x + y),
                                                    0.62 * scale - (-1.9 * x + y)))
        m = soft(d)
    elif k == 5:  # plus sign
        bar1 = np.minimum(0.24 * scale - np.abs(x), 0.8 * scale - np.abs(y))
        bar2 = np.minimum(0.24 * scale - np.abs(y), 0.8 * scale - np.abs(x))
        m = np.maximum(soft(bar1), soft(bar2))
    elif k == 6:  # X cross
        u, v = (x + y) / np.sqrt(2), (x - y) / np.sqrt(2)
        bar1 = np.minimum(0.2 * scale - np.abs(u), 0.85 * scale - np.abs(v))
        bar2 = np.minimum(0.2 * scale - np.abs(v), 0.85 * scale - np.abs(u))
        m = np.maximum(soft(bar1), soft(bar2))
    elif k == 7:  # two horizontal bars
        bar = lambda c: np.minimum(0.16 * scale - np.abs(y - c), 0.7 * scale - np.abs(x))
        m = np.maximum(soft(bar(-0.4 * scale)), soft(bar(0.4 * scale)))
    elif k == 8:  # single vertical bar
        m = soft(np.minimum(0.2 * scale - np.abs(x), 0.82 * scale - np.abs(y)))
    else:         # 2x2 checkerboard in a square
        inside = soft(scale * 0.72 - np.maximum(np.abs(x), np.abs(y)))
        quad = soft(x * y / (0.08 * scale))
        m = inside * quad
    return m


def make_synthetic_dataset(num_classes: int, n_per_class: int, size: int, rng: Rng) -> DatasetHandle:
    """Render class-distinct glyphs with randomized pose/color/background."""
    if size < 16:
        raise ParameterError(f"synthetic dataset: size must be >= 16, got {size}")
    if num_classes < 2 or n_per_class < 1:
        raise ParameterError("synthetic dataset: need num_classes >= 2 and n_per_class >= 1")
    n = num_classes * n_per_class
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for cls in range(num_classes):
        for j in range(n_per_class):
            r = rng.derive("synth", cls, j)
            mask = _shape_mask(cls, size, r)[None, :, :]
            bg = r.uniform(0.0, 0.35, (3, 1, 1)).astype(np.float64)
            fg = r.uniform(0.55, 1.0, (3, 1, 1)).astype(np.float64)
            images[i] = np.clip(bg * (1.0 - mask) + fg * mask, 0.0, 1.0).astype(np.float32)
            labels[i] = cls
            i += 1
    return DatasetHandle(images=images, labels=labels, num_classes=num_classes,
                         provenance="synthetic")


# -- IDX files ----------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def load_idx(images_path, labels_path) -> DatasetHandle:
    """Load big-endian IDX image/label files (grayscale, normalized to [0,1])."""
    raw_i = Path(images_path).read_bytes()
    raw_l = Path(labels_path).read_bytes()
    if len(raw_i) < 16:
        raise DataFormatError(f"{images_path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">IIII", raw_i[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: bad magic 0x{magic:08x}")
    if len(raw_i) != 16 + n * h * w:
        raise DataFormatError(f"{images_path}: payload size mismatch for {n}x{h}x{w}")
    if len(raw_l) < 8:
        raise DataFormatError(f"{labels_path}: truncated IDX header")
    lmagic, ln = struct.unpack(">II", raw_l[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: bad magic 0x{lmagic:08x}")
    if len(raw_l) != 8 + ln:
        raise DataFormatError(f"{labels_path}: payload size mismatch for {ln} labels")
    if ln != n:
        raise DataFormatError(f"IDX count mismatch: {n} images vs {ln} labels")
    images = np.frombuffer(raw_i, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    labels = np.frombuffer(raw_l, dtype=np.uint8, offset=8).astype(np.int64)
    return DatasetHandle(
        images=(images.astype(np.float32) / 255.0),
        labels=labels,
        num_classes=int(labels.max()) + 1 if n else 0,
        provenance="idx-file",
    )


# -- dataset container caching ------------------------------------------------


def save_dataset(path, data: DatasetHandle) -> None:
    save_container(path, Container(
        kind="dataset",
        meta={"num_classes": data.num_classes, "provenance": data.provenance},
        tensors=[("images", "extra", data.images), ("labels", "extra", data.labels)],
    ))


def load_dataset(path) -> DatasetHandle:
    c = load_container(path)
    if c.kind != "dataset":
        raise DataFormatError(f"{path}: container kind {c.kind!r}, expected 'dataset'")
    tmap = c.tensor_map()
    return DatasetHandle(
        images=tmap["images"].astype(np.float32),
        labels=tmap["labels"].astype(np.int64),
        num_classes=int(c.meta["num_classes"]),
        provenance="container",
    )


# -- corruptions ----------------------------------------------------------------


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Reflect-padded 2-d convolution of a C x H x W image."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    from . import tensor_core as tc

    padded = np.pad(img, ((0, 0), (ph, ph), (pw, pw)), mode="reflect")
    x = padded[:, None, :, :]  # channels as batch
    out = tc.conv2d(x.astype(np.float32), kernel[None, None].astype(np.float32), 1, 0)
    return out[:, 0, :, :]


def _disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    lin = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    k = np.clip(radius - np.sqrt(xx * xx + yy * yy) + 0.5, 0.0, 1.0)
    return (k / k.sum()).astype(np.float32)


def _line_kernel(length: int, angle: float) -> np.ndarray:
    k = np.zeros((length, length), dtype=np.float64)
    c = (length - 1) / 2.0
    for t in np.linspace(-c, c, 4 * length):
        i = int(round(c + t * np.sin(angle)))
        j = int(round(c + t * np.cos(angle)))
        k[i, j] += 1.0
    return (k / k.sum()).astype(np.float32)


def _pixelate(img: np.ndarray, block: int) -> np.ndarray:
    c, h, w = img.shape
    out = np.empty_like(img)
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            cell = img[:, y0 : y0 + block, x0 : x0 + block]
            out[:, y0 : y0 + block, x0 : x0 + block] = cell.mean(axis=(1, 2), keepdims=True)
    return out


def _block_quantize(img: np.ndarray, levels: int, block: int = 8) -> np.ndarray:
    c, h, w = img.shape
    out = img.copy()
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            cell = out[:, y0 : y0 + block, x0 : x0 + block]
            lo = cell.min(axis=(1, 2), keepdims=True)
            hi = cell.max(axis=(1, 2), keepdims=True)
            span = np.maximum(hi - lo, 1e-6)
            q = np.round((cell - lo) / span * (levels - 1)) / (levels - 1)
            out[:, y0 : y0 + block, x0 : x0 + block] = lo + q * span
    return out


def _corrupt_one(img: np.ndarray, spec: CorruptionSpec, r: Rng) -> np.ndarray:
    s = spec.severity - 1
    if spec.kind == "gaussian_noise":
        out = img + GAUSSIAN_SIGMA[s] * r.generator.standard_normal(img.shape)
    elif spec.kind == "shot_noise":
        lam = SHOT_PHOTONS[s]
        out = r.poisson(np.clip(img, 0, 1) * lam).astype(np.float64) / lam
    elif spec.kind == "impulse_noise":
        out = img.copy().astype(np.float64)
        frac = IMPULSE_FRACTION[s]
        mask = r.generator.random(img.shape[1:]) < frac
        salt = r.generator.random(img.shape[1:]) < 0.5
        out[:, mask & salt] = 1.0
        out[:, mask & ~salt] = 0.0
    elif spec.kind == "defocus_blur":
        out = _blur(img, _disk_kernel(DEFOCUS_RADIUS[s]))
    elif spec.kind == "motion_blur":
        angle = float(r.uniform(0.0, np.pi, ()))
        out = _blur(img, _line_kernel(MOTION_LENGTH[s], angle))
    elif spec.kind == "contrast":
        mu = img.mean()
        out = (img - mu) * CONTRAST_FACTOR[s] + mu
    elif spec.kind == "brightness":
        out = img + BRIGHTNESS_SHIFT[s]
    elif spec.kind == "pixelate":
        out = _pixelate(img, PIXELATE_BLOCK[s])
    else:  # jpeg
        out = _block_quantize(img, JPEG_LEVELS[s])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corrupt(data: DatasetHandle, spec: CorruptionSpec) -> DatasetHandle:
    """Apply one corruption per image; labels and shapes are unchanged."""
    root = Rng(spec.seed)
    out = np.empty_like(data.images)
    for i in range(data.images.shape[0]):
        r = root.derive("corrupt", spec.kind, spec.severity, i)
        out[i] = _corrupt_one(data.images[i], spec, r)
    return DatasetHandle(images=out, labels=data.labels, num_classes=data.num_classes,
                         provenance=data.provenance)


# -- batch streaming ---------------------------------------------------------


def stream_batches(data: DatasetHandle, batch_size: int, rng: Rng | None = None,
                   shuffle: bool = True, drop_last: bool = False,
                   with_labels: bool = True) -> list[Batch]:
    """Deterministic ordered batches B1..Bn.

    The final short batch is kept when it has >= 2 samples (batch-stats
    needs two), dropped otherwise or when drop_last is set.
    """
    if batch_size < 2:
        raise ParameterError(f"stream_batches: batch_size must be >= 2, got {batch_size}")
    n = data.images.shape[0]
    order = rng.permutation(n) if (shuffle and rng is not None) else np.arange(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < batch_size and (drop_last or len(idx) < 2):
            break
        batches.append(Batch(
            images=data.images[idx],
            labels=data.labels[idx] if with_labels else None,
            indices=idx,
        ))
    return batches
