"""Feed-forward plasticity for the first convolution layer.

Each of the K filters is treated as a post-synaptic neuron with weight row
w_k over the flattened patch dimension D = C*kh*kw.  Competition between
neurons at the same receptive field is a temperature-scaled softmax over
the K pre-activations (soft winner-take-all), and the weight update per
patch x is

    dw_k = eta * y_k * (R_k * x - (u_k / R_k) * w_k)

with u_k = <w_k, x> and y_k the soft-WTA output.  The decay term is
normalized by R_k so the weight norm's equilibrium sits exactly on the
sphere ||w_k|| = R_k: the norm grows below the sphere and shrinks above it
whenever the neuron is positively driven (sum of y*u positive).  At
R_k = 1 the rule is the plain soft-Hebbian form.

Updates are aggregated per batch: the patch-averaged step is applied once,
so results do not depend on patch ordering.  State mutates in place and is
strictly single-writer across batches.

The classical Oja step (linear activations, unit-sphere equilibrium) is
provided as a baseline rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import DimensionError, NonFiniteError, ParameterError


@dataclass
class HebbianLayerState:
    w: np.ndarray            # K x D, one row per post-synaptic neuron
    radius: np.ndarray       # K, target norm per neuron, > 0
    tau: float               # softmax temperature, > 0
    eta: float               # learning rate, > 0
    kernel_shape: tuple      # (K, C, kh, kw) view of w
    update_count: int = 0

    def kernel(self) -> np.ndarray:
        """The weight matrix reshaped back to conv layout."""
        return self.w.reshape(self.kernel_shape)

    def filter_norms(self) -> np.ndarray:
        return np.linalg.norm(self.w, axis=1)


def init_from_source(conv1_weights: np.ndarray, tau: float, eta: float,
                     radius_mode: str = "source-norm", radius_value: float = 1.0) -> HebbianLayerState:
    """Start adaptation from the source kernel, not from scratch.

    radius_mode 'source-norm' pins each R_k to the source filter's norm
    (zero-norm filters are rejected); 'fixed' uses radius_value for all.
    """
    if not (tau > 0 and eta >= 0):
        raise ParameterError(f"hebbian: need tau > 0 and eta >= 0, got tau={tau} eta={eta}")
    if conv1_weights.ndim != 4:
        raise DimensionError(f"hebbian: conv1 weights must be K x C x kh x kw, got {conv1_weights.shape}")
    tc.check_finite("conv1 weights", conv1_weights)
    k = conv1_weights.shape[0]
    w = conv1_weights.reshape(k, -1).astype(np.float32).copy()
    if radius_mode == "source-norm":
        radius = np.linalg.norm(w, axis=1).astype(np.float32)
        if np.any(radius <= 0):
            dead = np.nonzero(radius <= 0)[0].tolist()
            raise ParameterError(f"hebbian: zero-norm source filter(s) {dead}; radius must be > 0")
    elif radius_mode == "fixed":
        if not radius_value > 0:
            raise ParameterError(f"hebbian: fixed radius must be > 0, got {radius_value}")
        radius = np.full(k, radius_value, dtype=np.float32)
    else:
        raise ParameterError(f"hebbian: unknown radius_mode {radius_mode!r}")
    return HebbianLayerState(w=w, radius=radius, tau=float(tau), eta=float(eta),
                             kernel_shape=tuple(conv1_weights.shape))


def soft_wta_activations(state: HebbianLayerState, patches: np.ndarray):
    """Pre-activations u = patches @ w.T and soft-WTA outputs y.

    y rows sum to 1; the softmax runs over the K neurons per patch at
    temperature tau.
    """
    if patches.ndim != 2 or patches.shape[1] != state.w.shape[1]:
        raise DimensionError(
            f"soft_wta: patches {patches.shape} incompatible with weights {state.w.shape}"
        )
    u = patches @ state.w.T
    y = tc.softmax(u, temperature=state.tau, axis=1)
    return u, y


def hebbian_update(state: HebbianLayerState, patches: np.ndarray) -> HebbianLayerState:
    """One aggregated soft-Hebbian step over a batch of patches (in place)."""
    state.update_count += 1
    if state.eta == 0.0 or patches.shape[0] == 0:
        return state
    u, y = soft_wta_activations(state, patches)
    p = patches.shape[0]
    drive = (y * u).sum(axis=0)  # K, per-neuron sum of y_k * u_k
    grow = y.T @ patches         # K x D, sum of y_k * x
    dw = (state.eta / p) * (state.radius[:, None] * grow
                            - (drive / state.radius)[:, None] * state.w)
    if not np.all(np.isfinite(dw)):
        bad = np.nonzero(~np.isfinite(dw).all(axis=1))[0].tolist()
        raise NonFiniteError(f"hebbian_update: non-finite update for neuron(s) {bad}")
    state.w += dw.astype(np.float32)
    return state


def oja_update(weights: np.ndarray, patches: np.ndarray, eta: float) -> np.ndarray:
    """Classical Oja step with linear activations, averaged over the batch.

    dw_k = eta * mean_p[ y_k (x - y_k w_k) ] with y = patches @ w.T; the
    stationary direction is the data's first principal axis.
    """
    if patches.ndim != 2 or patches.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"oja_update: patches {patches.shape} incompatible with weights {weights.shape}"
        )
    p = patches.shape[0]
    if p == 0 or eta == 0.0:
        return weights
    y = patches @ weights.T  # P x K
    dw = (eta / p) * (y.T @ patches - ((y * y).sum(axis=0))[:, None] * weights)
    if not np.all(np.isfinite(dw)):
        bad = np.nonzero(~np.isfinite(dw).all(axis=1))[0].tolist()
        raise NonFiniteError(f"oja_update: non-finite update for neuron(s) {bad}")
    weights += dw.astype(np.float32)
    return weights


def adapt_conv1(state: HebbianLayerState, batch: np.ndarray, stride: int, padding: int) -> HebbianLayerState:
    """Extract conv1 patches from a batch and apply one hebbian_update.

    The updated state is immediately valid for the same batch's forward
    pass (update happens before prediction).
    """
    _, _, kh, kw = state.kernel_shape
    patches = tc.im2col(batch, kh, kw, stride, padding)
    return hebbian_update(state, patches)


def adapt_conv1_oja(weights_kernel: np.ndarray, batch: np.ndarray, eta: float,
                    stride: int, padding: int) -> np.ndarray:
    """Oja-baseline counterpart of adapt_conv1, on the conv kernel layout."""
    k, _, kh, kw = weights_kernel.shape
    patches = tc.im2col(batch, kh, kw, stride, padding)
    w = weights_kernel.reshape(k, -1)
    oja_update(w, patches, eta)
    return weights_kernel
