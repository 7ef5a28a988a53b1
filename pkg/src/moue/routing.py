"""Masked top-k routing with the dual-pathway router and fast-weight state."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NEG_INF, softmax_masked, softmax_rows, top_k_select
from .topology import ConnectivityMap


class RoutingError(ValueError):
    pass


@dataclass
class RouterParams:
    """Router weights for one layer, expressed over the global expert space.

    ``w_g`` is (d, E) and ``b_g`` is (E,); columns of unreachable experts are
    ignored.  ``w_k`` is the (d, d_k) key projection and ``beta`` the weight
    of the contextual pathway.
    """

    w_g: np.ndarray
    b_g: np.ndarray
    w_k: np.ndarray
    beta: float = 0.1

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise RoutingError("beta must be >= 0")


@dataclass
class FastWeightState:
    """Forward-only state U, one row per universal window slot."""

    U: np.ndarray
    eta: float = 0.1

    def update(self, K: np.ndarray, p_star: np.ndarray, eta: float | None = None) -> None:
        self.U = fast_weight_update(self.U, K, p_star, self.eta if eta is None else eta)


@dataclass(frozen=True)
class BiasSchedule:
    """Time-dependent bias on universal logits.

    ``suppression`` subtracts ``beta0 * max(0, 1 - t / t_end)``.
    ``warmup`` adds ``b0 * max(0, 1 - t / r)``, i.e. ``log rho(t)``.
    """

    kind: str
    start: float
    duration: float

    def __post_init__(self) -> None:
        if self.kind not in ("suppression", "warmup"):
            raise RoutingError(f"unknown schedule kind {self.kind!r}")

    def value_at(self, t: float) -> float:
        return schedule_value(self, t)

    def signed_at(self, t: float) -> float:
        v = schedule_value(self, t)
        return -v if self.kind == "suppression" else v


def suppression(beta0: float = 1e4, t_end: float = 0.5) -> BiasSchedule:
    return BiasSchedule("suppression", beta0, t_end)


def warmup(b0: float = 0.75, r: float = 0.05) -> BiasSchedule:
    return BiasSchedule("warmup", b0, r)


def schedule_value(s: BiasSchedule, t: float) -> float:
    if s.duration <= 0:
        return 0.0
    return s.start * max(0.0, 1.0 - t / s.duration)


def universal_bias(schedules, t: float) -> float:
    return float(sum(s.signed_at(t) for s in schedules))


@dataclass
class Selection:
    expert_ids: np.ndarray
    gates: np.ndarray


def compute_logits(h, layer: int, params: RouterParams, state: FastWeightState | None,
                   cmap: ConnectivityMap, schedules=(), t: float = 0.0) -> np.ndarray:
    """Routing logits over the global expert space for one layer.

    ``h`` may be a single token (d,) or a token matrix (N, d).  Unreachable
    experts get ``-inf``.
    """
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    H = h[None, :] if single else h
    z = H @ params.w_g + params.b_g
    uni = list(cmap.universal_ids(layer))
    if uni:
        if params.beta != 0.0:
            if state is None:
                raise RoutingError(f"missing fast-weight state for layer {layer}")
            z[:, uni] += params.beta * ((H @ params.w_k) @ state.U.T)
        bias = universal_bias(schedules, t)
        if bias != 0.0:
            z[:, uni] += bias
    z[:, ~cmap.mask[layer]] = NEG_INF
    return z[0] if single else z


def select_experts(z, k: int) -> Selection:
    """Top-k over logits; gates are the masked softmax renormalised over the pick."""
    ids, gates, _ = route(np.asarray(z)[None, :], k)
    return Selection(ids[0], gates[0])


def route(Z: np.ndarray, k: int):
    """Batched selection.  Returns (ids (N,k), gates (N,k), probs (N,E))."""
    probs = softmax_masked(Z)
    ids = top_k_select(Z, k)
    picked = np.take_along_axis(probs, ids, axis=1)
    gates = picked / picked.sum(axis=1, keepdims=True)
    return ids, gates, probs


def fast_weight_update(U: np.ndarray, K: np.ndarray, p_star: np.ndarray, eta: float) -> np.ndarray:
    """One forward-only step ``U - eta * (softmax(K U^T) - p*)^T K / N``."""
    U = np.asarray(U, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    p_star = np.asarray(p_star, dtype=np.float64)
    if K.ndim != 2 or p_star.ndim != 2 or U.ndim != 2:
        raise RoutingError("dimension mismatch: expected matrices")
    if K.shape[0] != p_star.shape[0] or K.shape[1] != U.shape[1] or p_star.shape[1] != U.shape[0]:
        raise RoutingError(
            f"dimension mismatch: U{U.shape} K{K.shape} p*{p_star.shape}")
    n = K.shape[0]
    if n == 0 or eta == 0.0:
        return U.copy()
    delta = softmax_rows(K @ U.T) - p_star
    return U - eta * (delta.T @ K) / n


def universal_targets(probs: np.ndarray, ids: np.ndarray, uni_ids, hard: bool = False):
    """Detached fast-weight targets restricted to the universal window.

    Soft targets renormalise the router probabilities over the window; hard
    targets spread mass evenly over the selected universal experts.  Returns
    (targets, row_mask); rows with no universal mass are dropped by the mask.
    """
    uni = np.asarray(uni_ids)
    if hard:
        sel = (ids[:, :, None] == uni[None, None, :]).any(axis=1).astype(np.float64)
    else:
        sel = probs[:, uni]
    tot = sel.sum(axis=1)
    keep = tot > 0
    out = np.zeros_like(sel)
    out[keep] = sel[keep] / tot[keep, None]
    return out, keep

