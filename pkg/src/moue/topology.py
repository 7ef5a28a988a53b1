"""Connectivity maps between layers and the global expert space.

Global expert IDs are laid out as one contiguous block of local experts per
layer (layer 0 first) followed by the universal block of ``num_universal``
ring positions.  A layer's allow-list is its local block plus a window of
ring positions in the universal block.

Layers are 0-indexed in code; the group of layer ``l`` is ``l // G``, which
is the 1-indexed ``floor((l - 1) / G)``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations, product

import numpy as np

from .numerics import log_binomial

VARIANTS = ("staggered", "forward_window", "reverse_order", "sandwich", "all_to_all")


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class TopologyConfig:
    num_layers: int
    group_size: int = 5
    num_universal: int = 8
    window: int = 4
    stride: int = 1
    locals_per_layer: int = 2
    top_k: int = 2

    def validate(self) -> None:
        for name in ("num_layers", "group_size", "num_universal", "window",
                     "stride", "locals_per_layer", "top_k"):
            if getattr(self, name) < 0:
                raise TopologyError(f"{name} must be >= 0")
        if self.num_layers < 1:
            raise TopologyError("num_layers must be >= 1")
        if not 1 <= self.group_size <= self.num_layers:
            raise TopologyError("group_size must be in [1, num_layers]")
        if self.window > self.num_universal:
            raise TopologyError("window exceeds ring")
        if self.num_universal > 0 and self.window < 1:
            raise TopologyError("window must be >= 1 when universal experts exist")
        if self.top_k > self.window + self.locals_per_layer:
            raise TopologyError("top_k exceeds reachable experts per layer")

    @property
    def num_groups(self) -> int:
        return -(-self.num_layers // self.group_size)

    def group_of(self, layer: int) -> int:
        return layer // self.group_size


@dataclass(frozen=True)
class ConnectivityMap:
    """Immutable per-layer reachability over global expert IDs.

    ``windows[l]`` lists the universal ring positions reachable at layer
    ``l`` in window order; fast-weight rows follow this order.
    ``block_groups[l]`` is the contiguous G-layer block of the layer.
    """

    num_layers: int
    locals_per_layer: int
    num_universal: int
    windows: tuple[tuple[int, ...], ...]
    block_groups: tuple[int, ...]
    kind: str = "staggered"

    @property
    def num_experts(self) -> int:
        return self.num_layers * self.locals_per_layer + self.num_universal

    @property
    def universal_offset(self) -> int:
        return self.num_layers * self.locals_per_layer

    def local_ids(self, layer: int) -> tuple[int, ...]:
        start = layer * self.locals_per_layer
        return tuple(range(start, start + self.locals_per_layer))

    def universal_ids(self, layer: int) -> tuple[int, ...]:
        off = self.universal_offset
        return tuple(off + j for j in self.windows[layer])

    def allow_list(self, layer: int) -> tuple[int, ...]:
        return self.local_ids(layer) + self.universal_ids(layer)

    def is_universal(self, expert_id: int) -> bool:
        return expert_id >= self.universal_offset

    @cached_property
    def mask(self) -> np.ndarray:
        """(L, E) boolean reachability matrix."""
        m = np.zeros((self.num_layers, self.num_experts), dtype=bool)
        for layer in range(self.num_layers):
            m[layer, list(self.allow_list(layer))] = True
        return m

    @cached_property
    def state_groups(self) -> tuple[int, ...]:
        """Index of each layer's distinct universal window, in first-seen order.

        Layers sharing a universal window share a reachability mask over the
        universal pool; they share fast-weight state and are pooled together
        for group-wise load statistics.
        """
        seen: dict[tuple[int, ...], int] = {}
        out = []
        for w in self.windows:
            out.append(seen.setdefault(w, len(seen)))
        return tuple(out)

    @property
    def num_state_groups(self) -> int:
        return len(set(self.state_groups))

    def group_layers(self, group: int) -> list[int]:
        return [l for l, g in enumerate(self.state_groups) if g == group]

    def group_masks(self) -> np.ndarray:
        """(num_blocks, E) union of allow-lists over each contiguous G-layer block."""
        nb = max(self.block_groups) + 1
        m = np.zeros((nb, self.num_experts), dtype=bool)
        for layer, g in enumerate(self.block_groups):
            m[g] |= self.mask[layer]
        return m

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer," + ",".join(f"e{i}" for i in range(self.num_experts)) + "\n")
        for layer in range(self.num_layers):
            row = ",".join("1" if v else "0" for v in self.mask[layer])
            buf.write(f"{layer},{row}\n")
        return buf.getvalue()


def _window(start: int, width: int, ring: int) -> tuple[int, ...]:
    if ring == 0:
        return ()
    return tuple((start + i) % ring for i in range(width))


def _from_starts(cfg: TopologyConfig, starts: list[int], kind: str, width: int | None = None) -> ConnectivityMap:
    width = cfg.window if width is None else width
    return ConnectivityMap(
        num_layers=cfg.num_layers,
        locals_per_layer=cfg.locals_per_layer,
        num_universal=cfg.num_universal,
        windows=tuple(_window(s, width, cfg.num_universal) for s in starts),
        block_groups=tuple(cfg.group_of(l) for l in range(cfg.num_layers)),
        kind=kind,
    )


def build_staggered(cfg: TopologyConfig) -> ConnectivityMap:
    """Group g reaches ring positions ``(g * stride + i) mod ring`` for ``i < window``."""
    cfg.validate()
    starts = [cfg.group_of(l) * cfg.stride for l in range(cfg.num_layers)]
    return _from_starts(cfg, starts, "staggered")


def build_variant(kind: str, cfg: TopologyConfig) -> ConnectivityMap:
    """Ablation topologies with the same per-layer reachable count.

    forward_window: the window moves by ``s`` every layer instead of every group.
    reverse_order:  groups walk the ring backwards, start ``-g*s``.
    sandwich:       first and last groups share the window at 0, the rest the
                    window at ``s``.
    all_to_all:     every layer reaches the whole ring.
    """
    if kind == "staggered":
        return build_staggered(cfg)
    if kind not in VARIANTS:
        raise TopologyError(f"unknown topology variant {kind!r}")
    cfg.validate()
    L, s = cfg.num_layers, cfg.stride
    if kind == "forward_window":
        starts = [l * s for l in range(L)]
    elif kind == "reverse_order":
        starts = [-cfg.group_of(l) * s for l in range(L)]
    elif kind == "sandwich":
        last = cfg.num_groups - 1
        starts = [0 if cfg.group_of(l) in (0, last) else s for l in range(L)]
    else:
        return _from_starts(cfg, [0] * L, kind, width=cfg.num_universal)
    if cfg.num_universal:
        starts = [st % cfg.num_universal for st in starts]
    return _from_starts(cfg, starts, kind)


def exposure_degrees(cmap: ConnectivityMap) -> np.ndarray:
    """Number of layers that can reach each universal ring position."""
    c = np.zeros(cmap.num_universal, dtype=np.int64)
    for w in cmap.windows:
        c[list(w)] += 1
    return c


def path_count_log(cmap: ConnectivityMap, k: int) -> float:
    """ln of the number of full-depth universal paths: sum over layers of ln C(window, k)."""
    total = 0.0
    for layer, w in enumerate(cmap.windows):
        if k > len(w):
            raise TopologyError(f"top_k {k} exceeds universal window at layer {layer}")
        total += log_binomial(len(w), k)
    return total


def path_count_exact(cmap: ConnectivityMap, k: int) -> int:
    """Integer path count, product over layers of C(window, k)."""
    out = 1
    for w in cmap.windows:
        if k > len(w):
            raise TopologyError("top_k exceeds universal window")
        out *= math.comb(len(w), k)
    return out


def enumerate_paths(cmap: ConnectivityMap, k: int) -> int:
    """Brute-force count of per-layer k-subset sequences.  Small maps only."""
    per_layer = [list(combinations(w, k)) for w in cmap.windows]
    return sum(1 for _ in product(*per_layer))


@dataclass(frozen=True)
class ModelDims:
    d_model: int
    d_ffn: int
    vocab: int
    d_key: int
    top_k: int

    @property
    def per_expert(self) -> int:
        return 2 * self.d_model * self.d_ffn

    def router_params(self, cmap: ConnectivityMap) -> int:
        # per layer: local projection + bias, universal projection + bias, key projection
        per_layer = ((self.d_model + 1) * (cmap.locals_per_layer + cmap.num_universal)
                     + self.d_model * self.d_key)
        return per_layer * cmap.num_layers

    def non_expert_params(self, cmap: ConnectivityMap) -> int:
        return 2 * self.vocab * self.d_model + self.router_params(cmap)


@dataclass(frozen=True)
class ParameterBudget:
    activated: int
    total_physical: int
    virtual: int


def parameter_budget(dims: ModelDims, cmap: ConnectivityMap) -> ParameterBudget:
    """Activated, total physical and virtual parameter counts.

    Router parameters sit in the non-expert part and count once in all three.
    Virtual counts each universal expert once per exposed layer, and once
    for storage if it is never exposed, so virtual >= physical always, with equality iff
    no universal expert is exposed to more than one layer.
    """
    base = dims.non_expert_params(cmap)
    pe = dims.per_expert
    L = cmap.num_layers
    activated = base + dims.top_k * pe * L
    physical = base + (L * cmap.locals_per_layer + cmap.num_universal) * pe
    c = exposure_degrees(cmap)
    virtual = base + (L * cmap.locals_per_layer + int(np.maximum(c, 1).sum())) * pe
    return ParameterBudget(activated, physical, virtual)
