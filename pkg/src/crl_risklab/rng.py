"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *path)``.  Philox is a
counter-based bit generator, so a stream depends only on its key: results do
not depend on call order, worker count or platform.
"""

from __future__ import annotations

import numpy as np


def _key(seed: int, path: tuple[int, ...]) -> np.random.SeedSequence:
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(p) & 0xFFFFFFFFFFFFFFFF for p in path]
    return np.random.SeedSequence(words)


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the stream ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(_key(seed, path)))


def derive_seed(seed: int, *path: int) -> int:
    """A 63-bit integer seed derived from ``(seed, *path)``."""
    return int(_key(seed, path).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Map uniforms to category indices by inverse-CDF lookup.

    ``probs`` is either one distribution of shape ``(k,)`` or one distribution
    per leading index of ``u`` (shape ``u.shape[:1] + (k,)``).  Zero-mass
    categories are never returned.
    """
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs, axis=-1)
    last = np.where(probs > 0, np.arange(probs.shape[-1]), -1).max(axis=-1)
    if probs.ndim == 1:
        idx = np.searchsorted(cdf, u, side="right")
        return np.minimum(idx, last)
    expand = (slice(None),) + (None,) * (u.ndim - 1)
    c = cdf[expand + (slice(None),)]
    idx = (c <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, last[expand])
