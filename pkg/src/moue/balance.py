"""Load statistics, Switch-style balancing and the exposure-normalised UELB.

Dispatch fractions are normalised by ``N_tok * k`` so they sum to one at
every layer for any top-k.  Fractions are treated as constants when
differentiating (Switch convention); only the mean probabilities carry
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .topology import ConnectivityMap, exposure_degrees

OBJECTIVES = ("uelb", "standard_lbl")


@dataclass
class LoadStats:
    """Dispatch fractions ``f`` and mean probabilities ``p`` over some expert axis.

    For a single layer the axis is the global expert space and ``mask`` marks
    the reachable experts.  Group stats built by :func:`group_stats` use one
    entry per (layer, expert) exposure instead.
    """

    f: np.ndarray
    p: np.ndarray
    mask: np.ndarray
    n_tokens: int
    top_k: int
    layer: int | None = None

    @property
    def num_reachable(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class AlphaConfig:
    alpha_loc: float = 1.0
    alpha_u: float = 0.5
    group_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha_loc < 0 or self.alpha_u < 0:
            raise ValueError("alphas must be >= 0")


def accumulate_stats(ids: np.ndarray, probs: np.ndarray, layer: int | None = None,
                     mask: np.ndarray | None = None) -> LoadStats:
    """Per-layer stats from top-k ids (N, k) and masked probabilities (N, E)."""
    ids = np.asarray(ids)
    probs = np.asarray(probs, dtype=np.float64)
    if ids.ndim == 1:
        ids = ids[:, None]
    n, k = ids.shape
    if n == 0:
        raise ValueError("empty batch")
    E = probs.shape[1]
    counts = np.bincount(ids.ravel(), minlength=E).astype(np.float64)
    if mask is None:
        mask = probs.sum(axis=0) > 0
        mask[ids.ravel()] = True
    return LoadStats(
        f=counts / (n * k),
        p=probs.mean(axis=0),
        mask=np.asarray(mask, dtype=bool),
        n_tokens=n,
        top_k=k,
        layer=layer,
    )


def standard_lbl(stats: LoadStats) -> float:
    """Switch loss ``N_e * sum_i f_i P_i`` with N_e the reachable count."""
    m = stats.mask
    return float(stats.num_reachable * np.dot(stats.f[m], stats.p[m]))


def uelb_loss(stats: list[LoadStats], cmap: ConnectivityMap, alphas: AlphaConfig = AlphaConfig()) -> float:
    """Exposure-normalised balance loss over all layers.

    ``alpha_loc * sum_l sum_local f P + alpha_u * sum_j sum_l [j reachable at l] f_j P_j / exposure_j``
    multiplied by ``alphas.group_scale``.  Unexposed universal experts add 0.
    """
    if len(stats) != cmap.num_layers:
        raise ValueError("stats must cover every layer")
    c = exposure_degrees(cmap)
    off = cmap.universal_offset
    local_term = 0.0
    uni_term = np.zeros(cmap.num_universal)
    for layer, st in enumerate(stats):
        loc = list(cmap.local_ids(layer))
        local_term += float(np.dot(st.f[loc], st.p[loc]))
        for j in cmap.windows[layer]:
            uni_term[j] += st.f[off + j] * st.p[off + j]
    exposed = c > 0
    universal = float(np.sum(uni_term[exposed] / c[exposed]))
    return alphas.group_scale * (alphas.alpha_loc * local_term + alphas.alpha_u * universal)


def calibrate_alphas(group_layers: int, shared_experts: int, top_k: int,
                     base: AlphaConfig = AlphaConfig()) -> AlphaConfig:
    """Scale correction for a group-concatenated Switch loss.

    Concatenating the per-layer stats of ``group_layers`` layers and taking one
    Switch loss gives ``group_layers`` for a uniform router; dividing by it
    restores the single-layer value of 1.  With k-normalised fractions the
    uniform value does not depend on ``top_k`` or ``shared_experts``.
    """
    if min(group_layers, shared_experts, top_k) < 1:
        raise ValueError("counts must be >= 1")
    return replace(base, group_scale=base.group_scale / group_layers)


def concatenated_switch_loss(stats: list[LoadStats]) -> float:
    """One Switch loss over the concatenated (layer, expert) stats of a group, uncorrected."""
    n_e = stats[0].num_reachable
    return float(n_e * sum(np.dot(s.f[s.mask], s.p[s.mask]) for s in stats))


def group_stats(stats: list[LoadStats]) -> LoadStats:
    """Concatenate per-layer stats of a group along the exposure axis.

    Each (layer, reachable expert) pair becomes one entry with its fraction
    divided by the number of layers, so the group fractions sum to one.
    """
    G = len(stats)
    f = np.concatenate([s.f[s.mask] for s in stats]) / G
    p = np.concatenate([s.p[s.mask] for s in stats]) / G
    return LoadStats(f=f, p=p, mask=np.ones(f.shape, dtype=bool),
                     n_tokens=sum(s.n_tokens for s in stats), top_k=stats[0].top_k)


def max_mean_ratio(stats: LoadStats) -> float:
    f = stats.f[stats.mask]
    if f.size == 0:
        raise ValueError("empty stats")
    mean = f.mean()
    return float(f.max() / mean)


def aux_weights(cmap: ConnectivityMap, alphas: AlphaConfig = AlphaConfig()) -> np.ndarray:
    """Per-layer weights ``w`` of the training UELB, ``sum_l w_l . (f_l * P_l)``.

    Each state group contributes one Switch-scaled loss divided by its layer
    count; local experts carry alpha_loc and universal ones alpha_u / exposure.
    """
    L, E = cmap.num_layers, cmap.num_experts
    c = exposure_degrees(cmap)
    off = cmap.universal_offset
    w = np.zeros((L, E))
    for layer in range(L):
        G = len(cmap.group_layers(cmap.state_groups[layer]))
        scale = int(cmap.mask[layer].sum()) / G
        uni = list(cmap.windows[layer])
        w[layer, list(cmap.local_ids(layer))] = scale * alphas.alpha_loc
        w[layer, [off + j for j in uni]] = scale * alphas.alpha_u / c[uni]
    return w


def aux_loss(stats: list[LoadStats], weights: np.ndarray) -> float:
    return float(sum(np.dot(weights[l], s.f * s.p) for l, s in enumerate(stats)))


class AuxObjective:
    """Training auxiliary loss with its gradient w.r.t. each layer's mean probabilities.

    ``uelb``: the exposure-normalised bilinear form of :func:`aux_weights`.

    ``standard_lbl``: the conventional Switch loss with tokens concatenated
    across the G layers of each state group, ``N_g * sum_j F_j Pbar_j`` where
    ``F`` and ``Pbar`` average the per-layer fractions and probabilities over
    the group and ``N_g`` is the size of the group's reachable union.  A
    universal expert's load is summed over every layer that reaches it, so
    its penalty grows with its exposure.

    Calling the objective returns ``(loss, [dloss/dP_l for each layer])``;
    dispatch fractions are constants.
    """

    def __init__(self, cmap: ConnectivityMap, objective: str = "uelb",
                 alphas: AlphaConfig = AlphaConfig()):
        if objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {objective!r}")
        self.cmap = cmap
        self.objective = objective
        self.weights = aux_weights(cmap, alphas) if objective == "uelb" else None
        self.groups = [cmap.group_layers(g) for g in sorted(set(cmap.state_groups))]

    def __call__(self, stats: list[LoadStats]):
        if self.weights is not None:
            grads = [self.weights[l] * s.f for l, s in enumerate(stats)]
            return aux_loss(stats, self.weights), grads
        grads: list = [None] * len(stats)
        total = 0.0
        for layers in self.groups:
            G = len(layers)
            F = sum(stats[l].f for l in layers) / G
            P = sum(stats[l].p for l in layers) / G
            n_union = int(self.cmap.mask[layers].any(axis=0).sum())
            total += n_union * float(np.dot(F, P))
            for l in layers:
                grads[l] = n_union * F / G
        return total, grads


def group_uelb_loss(stats: list[LoadStats], cmap: ConnectivityMap,
                    alphas: AlphaConfig = AlphaConfig()) -> float:
    """Training form of UELB: per state group, a calibrated Switch-scaled UELB."""
    c = exposure_degrees(cmap)
    total = 0.0
    for g in sorted(set(cmap.state_groups)):
        layers = cmap.group_layers(g)
        cal = calibrate_alphas(len(layers), max(len(cmap.windows[layers[0]]), 1),
                               stats[layers[0]].top_k, alphas)
        sub = 0.0
        for layer in layers:
            st = stats[layer]
            loc = list(cmap.local_ids(layer))
            sub += cal.alpha_loc * float(np.dot(st.f[loc], st.p[loc]))
            for j in cmap.windows[layer]:
                e = cmap.universal_offset + j
                sub += cal.alpha_u * st.f[e] * st.p[e] / c[j]
        total += cal.group_scale * stats[layers[0]].num_reachable * sub
    return total
