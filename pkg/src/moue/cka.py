"""Linear CKA between expert weight matrices."""

from __future__ import annotations

import numpy as np

from .model import ExpertParams


class DegenerateNormError(ValueError):
    pass


def expert_features(e: ExpertParams) -> np.ndarray:
    """[up ; down^T] as a (d, 2*d_ffn) matrix with centred columns."""
    x = np.concatenate([np.asarray(e.up), np.asarray(e.down).T], axis=1).astype(np.float64)
    return x - x.mean(axis=0, keepdims=True)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F) on already centred matrices."""
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    nx = np.linalg.norm(x.T @ x)
    ny = np.linalg.norm(y.T @ y)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateNormError("degenerate norm")
    cross = np.linalg.norm(x.T @ y) ** 2
    return float(min(max(cross / (nx * ny), 0.0), 1.0))


def cka_similarity(a: ExpertParams, b: ExpertParams) -> float:
    return linear_cka(expert_features(a), expert_features(b))


def cka_matrix(experts: list[ExpertParams]) -> np.ndarray:
    """Symmetric similarity matrix with an exact unit diagonal."""
    feats = [expert_features(e) for e in experts]
    n = len(feats)
    out = np.eye(n)
    for i in range(n):
        linear_cka(feats[i], feats[i])  # raises on degenerate experts
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = linear_cka(feats[i], feats[j])
    return out
