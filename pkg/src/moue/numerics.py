"""Dense float64 kernels shared by the rest of the package.

Randomness comes exclusively from :func:`make_rng`, which wraps numpy's PCG64
bit generator (PCG-XSL-RR 128/64, O'Neill 2014).  PCG64 produces the same
stream on every platform for a given seed, so every seeded run in this
package is reproducible byte for byte.
"""

from __future__ import annotations

import math

import numpy as np

NEG_INF = -np.inf


class EmptyReachableSetError(ValueError):
    """Raised when a masked softmax has nothing left to normalise over."""


class InsufficientExpertsError(ValueError):
    """Raised when top-k asks for more entries than are finite."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only RNG constructor used in the package."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def softmax_masked(logits, mask=None) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``.

    Masked positions come out as exactly 0.  ``mask`` defaults to the finite
    entries of ``logits``.  Works on vectors and on row-stacked matrices.
    """
    z = np.asarray(logits, dtype=np.float64)
    if mask is None:
        mask = np.isfinite(z)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise EmptyReachableSetError("empty reachable set")
    safe = np.where(mask, z, -np.inf)
    zmax = np.max(safe, axis=-1, keepdims=True)
    e = np.where(mask, np.exp(safe - zmax), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Plain stabilised row softmax (no masking)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def top_k_select(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores along the last axis.

    Order is descending score, ties broken by the lower index.  ``-inf``
    entries are never returned.
    """
    s = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(s).sum(axis=-1)
    if np.any(finite < k):
        raise InsufficientExpertsError("insufficient reachable experts")
    # stable sort on the negated scores keeps equal scores in index order
    order = np.argsort(-s, axis=-1, kind="stable")
    return order[..., :k]


def log_binomial(n: int, k: int) -> float:
    """Natural log of the binomial coefficient C(n, k) via log-gamma."""
    if k < 0 or n < 0 or k > n:
        raise ValueError("invalid binomial")
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def causal_mean(h: np.ndarray) -> np.ndarray:
    """Running mean over the time axis (axis -2) of a (batch, T, d) array."""
    T = h.shape[-2]
    counts = np.arange(1, T + 1, dtype=np.float64)[:, None]
    return np.cumsum(h, axis=-2) / counts


def causal_mean_backward(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`causal_mean`: ``out[s] = sum_{t >= s} g[t] / (t+1)``."""
    T = g.shape[-2]
    counts = np.arange(1, T + 1, dtype=np.float64)[:, None]
    scaled = g / counts
    return np.flip(np.cumsum(np.flip(scaled, axis=-2), axis=-2), axis=-2)
