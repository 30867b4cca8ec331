"""Dense-tensor primitives used by every other module.

The tensor carrier is a plain ``numpy.ndarray`` in float32, row-major,
with image batches laid out N x C x H x W.  Operations preserve the input
dtype (float64 inputs stay float64, which the finite-difference oracles
rely on) but the package-wide convention is float32 storage.  Reductions
may accumulate wider inside BLAS; the stored result is the input dtype.

All functions are pure and deterministic: identical inputs give
bit-identical outputs on one platform.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

BN_EPS = 1e-5


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Raise if ``arr`` contains NaN/Inf; returns the array unchanged."""
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise DimensionError(f"{name}: {bad} non-finite element(s)")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a[m,k] @ b[k,n]; accumulation may be wider than 32-bit."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise DimensionError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride != 0:
        raise DimensionError(
            f"non-integral output size: ({size}+2*{padding}-{k}) not divisible by stride {stride}"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold N x C x H x W into patch rows.

    Output is (N*H'*W') x (C*kh*kw).  Row order is image-major, then output
    row, then output column; within a row the layout is (c, kh, kw)
    row-major, matching ``kernel.reshape(K, -1)``.
    """
    if x.ndim != 4:
        raise DimensionError(f"im2col: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: N x C x Ho x Wo x kh x kw
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add inverse of :func:`im2col` (used by convolution backward)."""
    n, c, h, w = x_shape
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    win = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += win[:, :, :, :, i, j]
    if padding > 0:
        xp = xp[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(xp)


def conv2d_with_cols(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0):
    """Convolution forward that also returns its im2col patch matrix.

    The gradient tape reuses the patch matrix in the backward pass; sharing
    this helper keeps tape and plain forwards bit-identical.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: need 4-d input/kernel, got {x.shape}, {kernel.shape}")
    if stride < 1:
        raise ParameterError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d: channel mismatch input {c} vs kernel {ck}")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(k, c * kh * kw).T  # (N*Ho*Wo) x K
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))
    return out, cols


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation (no kernel flip) with zero padding.

    x: N x C x H x W, kernel: K x C x kh x kw -> N x K x H' x W' where
    H' = (H + 2p - kh)/stride + 1 (must be integral).
    """
    out, _ = conv2d_with_cols(x, kernel, stride, padding)
    return out


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    """Normalize with current-batch statistics per channel.

    Returns (y, cache); cache = (x_hat, inv_std, gamma, mu, var) holds what
    the backward pass needs.  Zero-variance channels are guarded by eps.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if n * h * w < 2:
        raise DimensionError(f"batchnorm: needs >= 2 values per channel, got {n * h * w}")
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), (x_hat, inv_std, gamma, mu, var)


def batchnorm_inference(x, gamma, beta, running_mean, running_var):
    """Normalize with stored running statistics (source-stats mode)."""
    inv_std = 1.0 / np.sqrt(running_var + BN_EPS)
    x_hat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    return gamma[None, :, None, None] * x_hat + beta[None, :, None, None]


def softmax(u: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature-scaled softmax, computed with max-subtraction."""
    if not temperature > 0:
        raise ParameterError(f"softmax: temperature must be > 0, got {temperature}")
    z = u / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(u: np.ndarray, axis: int = -1) -> np.ndarray:
    z = u - u.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _pool_view(x, k, stride):
    n, c, h, w = x.shape
    ho = _conv_out_size(h, k, stride, 0)
    wo = _conv_out_size(w, k, stride, 0)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride, :, :], ho, wo


def maxpool2d(x: np.ndarray, k: int, stride: int | None = None) -> np.ndarray:
    """Max pooling with square window; stride defaults to the window size."""
    stride = k if stride is None else stride
    win, _, _ = _pool_view(x, k, stride)
    return win.max(axis=(4, 5))


def avgpool2d(x: np.ndarray, k: int, stride: int | None = None) -> np.ndarray:
    """Average pooling; used by the residual blocks for downsampling."""
    stride = k if stride is None else stride
    win, _, _ = _pool_view(x, k, stride)
    return win.mean(axis=(4, 5)).astype(x.dtype, copy=False)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """N x C x H x W -> N x C mean over spatial dims."""
    return x.mean(axis=(2, 3)).astype(x.dtype, copy=False)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x[N,D] @ w[C,D].T + b[C]."""
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: feature mismatch {x.shape} vs {w.shape}")
    return x @ w.T + b


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood with log-sum-exp stabilization."""
    if logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: {logits.shape[0]} logits vs {labels.shape[0]} labels")
    ls = log_softmax(logits, axis=1)
    return float(-ls[np.arange(logits.shape[0]), labels].mean())


def entropy(logits: np.ndarray) -> np.ndarray:
    """Per-row Shannon entropy (nats) of softmax(logits)."""
    ls = log_softmax(logits, axis=1)
    return -(np.exp(ls) * ls).sum(axis=1)
