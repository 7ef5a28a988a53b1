"""Seeded multi-domain Markov token streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import make_rng


@dataclass
class SyntheticCorpus:
    """First-order Markov sources, one transition table per domain.

    Rows of each table are drawn from a sparse Dirichlet so every domain has
    a few likely successors per token, which is learnable at desk scale.
    """

    vocab: int
    num_domains: int
    seed: int
    concentration: float = 0.1

    def __post_init__(self) -> None:
        if not 1 <= self.vocab <= 64:
            raise ValueError("vocab must be in [1, 64]")
        if self.num_domains < 1:
            raise ValueError("num_domains must be >= 1")
        rng = make_rng(self.seed)
        alpha = np.full(self.vocab, self.concentration)
        self.tables = rng.dirichlet(alpha, size=(self.num_domains, self.vocab))
        self._rng = make_rng(self.seed + 1)

    def sample(self, batch: int, seq_len: int, rng: np.random.Generator | None = None):
        """Returns (tokens (batch, seq_len), domains (batch,))."""
        rng = self._rng if rng is None else rng
        domains = rng.integers(0, self.num_domains, size=batch)
        tokens = np.empty((batch, seq_len), dtype=np.int64)
        tokens[:, 0] = rng.integers(0, self.vocab, size=batch)
        cdf = np.cumsum(self.tables, axis=-1)
        for t in range(1, seq_len):
            rows = cdf[domains, tokens[:, t - 1]]
            u = rng.random(batch)[:, None]
            tokens[:, t] = np.minimum((u > rows).sum(axis=1), self.vocab - 1)
        return tokens, domains


def repeating_sequence(length: int, vocab: int, batch: int, seq_len: int, seed: int = 0,
                       cycle_seed: int = 0) -> np.ndarray:
    """Batches cut from one fixed cycle of ``length`` tokens, random phase per row.

    The cycle depends only on ``cycle_seed``; ``seed`` picks the phases.
    """
    crng = make_rng(cycle_seed)
    cycle = crng.permutation(vocab)[:length] if length <= vocab else crng.integers(0, vocab, length)
    phase = make_rng(seed).integers(0, length, size=batch)
    idx = (phase[:, None] + np.arange(seq_len)[None, :]) % length
    return cycle[idx]
