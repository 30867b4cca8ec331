"""Deterministic random number generation.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's PCG64 bit generator.  The stream for a given seed is fixed:
two processes (or platforms running the same numpy version) seeded alike
produce identical samples.  Derived streams are built with
``numpy.random.SeedSequence(seed, spawn_key=...)`` where string tokens are
mapped to uint32 words via SHA-256; the derivation is documented here so
external tools can reproduce it.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "pcg64"


def _token_words(token) -> tuple[int, ...]:
    """Map a str/int derivation token to uint32 words (SHA-256 based)."""
    if isinstance(token, (int, np.integer)):
        v = int(token) & 0xFFFFFFFFFFFFFFFF
        return (v & 0xFFFFFFFF, v >> 32)
    digest = hashlib.sha256(str(token).encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


class Rng:
    """Seeded PCG64 stream with documented child-stream derivation.

    Continuous distributions are drawn in float64 and cast to float32 by
    callers that need the packed dtype; the draw order is part of the
    reproducibility contract.
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self.algorithm = ALGORITHM
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def derive(self, *tokens) -> "Rng":
        """Independent child stream keyed by (seed, *tokens)."""
        key = tuple(w for t in tokens for w in _token_words(t))
        return Rng(self.seed, _seq=np.random.SeedSequence(self.seed, spawn_key=key))

    # -- sampling helpers -------------------------------------------------

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self.generator.standard_normal(shape) * scale).astype(np.float32)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, shape).astype(np.float32)

    def integers(self, low: int, high: int, shape=None):
        return self.generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def poisson(self, lam) -> np.ndarray:
        return self.generator.poisson(lam)
