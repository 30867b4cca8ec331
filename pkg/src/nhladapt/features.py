"""Channelwise feature histograms for distribution-recovery analysis.

For a chosen tap (the post-conv1 feature map or the penultimate pooled
features) this module histograms activations per channel into 64 fixed
bins.  Bin ranges are recorded from a reference pass and reused for every
compared pass, so histograms are directly comparable; values outside the
range are clipped into the edge bins, which conserves total mass.
"""

from __future__ import annotations

import numpy as np

from . import source_model
from .errors import ParameterError
from .source_model import ModelCheckpoint

TAPS = ("post_conv1", "penultimate")
NUM_BINS = 64


def _tap_values(model: ModelCheckpoint, images: np.ndarray, tap: str, mode: str,
                batch_size: int):
    """Yield per-batch tap arrays reshaped to (channels, values)."""
    n = images.shape[0]
    start = 0
    while start < n:
        stop = min(start + batch_size, n)
        if mode == "batch-stats" and n - stop == 1:
            stop = n
        _, taps = source_model.forward(model, images[start:stop], mode, want_taps=True)
        arr = taps[tap]
        if arr.ndim == 4:
            vals = arr.transpose(1, 0, 2, 3).reshape(arr.shape[1], -1)
        else:
            vals = arr.T
        yield vals
        start = stop


def channel_ranges(model: ModelCheckpoint, images: np.ndarray, tap: str,
                   mode: str = "source-stats", batch_size: int = 256, pad: float = 0.05):
    """Per-channel (lo, hi) from one reference pass, padded outward."""
    if tap not in TAPS:
        raise ParameterError(f"unknown tap {tap!r}; expected one of {TAPS}")
    lo = None
    hi = None
    for vals in _tap_values(model, images, tap, mode, batch_size):
        bl, bh = vals.min(axis=1), vals.max(axis=1)
        lo = bl if lo is None else np.minimum(lo, bl)
        hi = bh if hi is None else np.maximum(hi, bh)
    span = np.maximum(hi - lo, 1e-6)
    return (lo - pad * span).astype(np.float64), (hi + pad * span).astype(np.float64)


def feature_histograms(model: ModelCheckpoint, images: np.ndarray, tap: str,
                       ranges, mode: str = "source-stats", batch_size: int = 256):
    """Per-channel histogram counts over NUM_BINS fixed bins.

    Returns an int64 array of shape (channels, NUM_BINS); per channel the
    counts sum to the number of contributing values.
    """
    lo, hi = ranges
    counts = np.zeros((lo.shape[0], NUM_BINS), dtype=np.int64)
    for vals in _tap_values(model, images, tap, mode, batch_size):
        clipped = np.clip(vals, lo[:, None], hi[:, None])
        for c in range(vals.shape[0]):
            h, _ = np.histogram(clipped[c], bins=NUM_BINS, range=(lo[c], hi[c]))
            counts[c] += h
    return counts


def histogram_l1(counts_a: np.ndarray, counts_b: np.ndarray) -> float:
    """Total L1 distance between per-channel normalized histograms."""
    pa = counts_a / np.maximum(counts_a.sum(axis=1, keepdims=True), 1)
    pb = counts_b / np.maximum(counts_b.sum(axis=1, keepdims=True), 1)
    return float(np.abs(pa - pb).sum())


def collect_raw_maps(model: ModelCheckpoint, images: np.ndarray, tap: str = "post_conv1",
                     mode: str = "source-stats", limit: int = 8) -> np.ndarray:
    """Raw tap maps for the first few images (feature-map dumps)."""
    take = images[: max(2, min(limit, images.shape[0]))]
    _, taps = source_model.forward(model, take, mode, want_taps=True)
    return taps[tap][:limit]
