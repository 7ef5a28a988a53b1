"""Model <-> checkpoint conversion and the MoE -> MoUE warm start.

A plain MoE is a :class:`MoueModel` with an empty universal pool.  The
conversion clones the most active intermediate-layer experts into the
universal pool, keeps the per-layer local routers untouched and attaches a
large, linearly annealed negative bias to every universal logit so the
converted model starts out routing exactly like its source.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .model import PARAM_NAMES, ModelConfig, MoueModel
from .numerics import make_rng
from .routing import BiasSchedule
from .topology import ConnectivityMap, TopologyConfig, build_variant


class ConversionError(ValueError):
    pass


# -- model <-> checkpoint -------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_like(default, text: str):
    if isinstance(default, bool):
        return text in ("1", "true", "True")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _encode_windows(windows) -> str:
    return ";".join(" ".join(str(j) for j in w) for w in windows)


def _decode_windows(text: str, num_layers: int):
    parts = text.split(";") if num_layers else []
    if len(parts) != num_layers:
        raise CheckpointError("window list does not match num_layers")
    return tuple(tuple(int(x) for x in p.split()) for p in parts)


def _encode_schedules(schedules) -> str:
    return ",".join(f"{s.kind}:{s.start!r}:{s.duration!r}" for s in schedules)


def _decode_schedules(text: str) -> list[BiasSchedule]:
    out = []
    for item in filter(None, text.split(",")):
        kind, start, dur = item.split(":")
        out.append(BiasSchedule(kind, float(start), float(dur)))
    return out


def model_to_checkpoint(model: MoueModel, extra: dict[str, str] | None = None) -> Checkpoint:
    m = model.cmap
    meta = {
        "topology.kind": m.kind,
        "topology.num_layers": str(m.num_layers),
        "topology.locals_per_layer": str(m.locals_per_layer),
        "topology.num_universal": str(m.num_universal),
        "topology.windows": _encode_windows(m.windows),
        "topology.block_groups": " ".join(str(g) for g in m.block_groups),
    }
    for k, v in asdict(model.cfg).items():
        meta[f"model.{k}"] = _fmt(v)
    meta["schedules"] = _encode_schedules(model.schedules)
    meta["moue.converted"] = "0"
    meta.update(extra or {})
    tensors = {name: model.params[name] for name in PARAM_NAMES}
    for g, st in sorted(model.states.items()):
        tensors[f"state.{g}.U"] = st.U
    return Checkpoint(meta, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> MoueModel:
    meta = ckpt.metadata
    try:
        L = int(meta["topology.num_layers"])
        cmap = ConnectivityMap(
            num_layers=L,
            locals_per_layer=int(meta["topology.locals_per_layer"]),
            num_universal=int(meta["topology.num_universal"]),
            windows=_decode_windows(meta["topology.windows"], L),
            block_groups=tuple(int(x) for x in meta["topology.block_groups"].split()),
            kind=meta.get("topology.kind", "staggered"),
        )
        defaults = ModelConfig()
        cfg = ModelConfig(**{
            f.name: _parse_like(getattr(defaults, f.name), meta[f"model.{f.name}"])
            for f in fields(ModelConfig)
        })
    except KeyError as exc:
        raise CheckpointError(f"missing metadata key {exc.args[0]}") from None
    model = MoueModel(cmap, cfg, seed=0, schedules=_decode_schedules(meta.get("schedules", "")))
    for name in PARAM_NAMES:
        if name not in ckpt.tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        arr = np.array(ckpt.tensors[name], dtype=np.float64)
        if arr.shape != model.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {model.params[name].shape}")
        model.params[name] = arr
    for g, st in model.states.items():
        key = f"state.{g}.U"
        if key in ckpt.tensors:
            st.U = np.array(ckpt.tensors[key], dtype=np.float64)
    return model


def is_converted(ckpt: Checkpoint) -> bool:
    return ckpt.metadata.get("moue.converted", "0") == "1"


# -- activation profile and selection -------------------------------------------------------

@dataclass
class ActivationProfile:
    """``rates[l, i]``: fraction of routed slots at layer l that went to local expert i."""

    rates: np.ndarray


def collect_activation_profile(model: MoueModel, tokens) -> ActivationProfile:
    if model.cmap.num_universal:
        raise ConversionError("activation profile expects a layer-local MoE")
    res = model.forward(tokens)
    rates = np.stack([st.f[list(model.cmap.local_ids(l))] for l, st in enumerate(res.stats)])
    return ActivationProfile(rates)


def default_band(num_layers: int) -> tuple[int, int]:
    """Middle third of the stack as a half-open layer range."""
    lo, hi = num_layers // 3, num_layers - num_layers // 3
    return (lo, hi) if hi > lo else (0, num_layers)


def select_universal_experts(profile: ActivationProfile, n_u: int,
                             band: tuple[int, int] | None = None) -> list[tuple[int, int]]:
    """Top ``n_u`` (layer, local expert) pairs by rate inside ``band``.

    Ties go to the lexicographically smaller (layer, expert).
    """
    L, n_loc = profile.rates.shape
    lo, hi = default_band(L) if band is None else band
    lo, hi = max(lo, 0), min(hi, L)
    if hi <= lo or n_loc == 0:
        raise ConversionError("band empty")
    cands = [(-float(profile.rates[l, i]), l, i) for l in range(lo, hi) for i in range(n_loc)]
    if n_u > len(cands):
        raise ConversionError(f"cannot select {n_u} experts from {len(cands)} in band")
    return [(l, i) for _, l, i in sorted(cands)[:n_u]]


# -- conversion -----------------------------------------------------------------------------

def convert_to_moue(moe_ckpt: Checkpoint, topo: TopologyConfig, selection, *,
                    variant: str = "staggered", beta0: float = 1e4, t_end: float = 0.5,
                    noise: float = 1e-3, seed: int = 0) -> Checkpoint:
    """Clone selected experts into a universal pool and attach logit suppression.

    Sources stay in place as local experts.  Local router weights are carried
    over unchanged; each layer's new universal router column j starts as the
    router column of its source expert (at the source layer) plus seeded noise.
    """
    if is_converted(moe_ckpt):
        raise ConversionError("checkpoint is already a converted MoUE")
    src = model_from_checkpoint(moe_ckpt)
    sm = src.cmap
    if sm.num_universal:
        raise ConversionError("source must be a layer-local MoE")
    if topo.num_layers != sm.num_layers or topo.locals_per_layer != sm.locals_per_layer:
        raise ConversionError("topology does not match source layers/locals")
    if topo.top_k != src.cfg.top_k:
        raise ConversionError("top_k does not match source")
    selection = [tuple(s) for s in selection]
    if len(selection) != topo.num_universal:
        raise ConversionError(f"selection size {len(selection)} != num_universal {topo.num_universal}")
    for l, i in selection:
        if not (0 <= l < sm.num_layers and 0 <= i < sm.locals_per_layer):
            raise ConversionError(f"selection {(l, i)} outside source")

    if topo.num_universal == 0:
        out = Checkpoint(dict(moe_ckpt.metadata), {k: v.copy() for k, v in moe_ckpt.tensors.items()})
        out.metadata["moue.converted"] = "1"
        return out

    cmap = build_variant(variant, topo)
    sched = [BiasSchedule("suppression", beta0, t_end)]
    dst = MoueModel(cmap, src.cfg, seed=seed, schedules=sched + list(src.schedules))
    p, q = src.params, dst.params
    n_loc = sm.num_layers * sm.locals_per_layer
    for name in ("embedding", "readout", "router.local", "router.local_bias", "router.key"):
        q[name] = p[name].copy()
    q["expert.up"][:n_loc] = p["expert.up"]
    q["expert.down"][:n_loc] = p["expert.down"]
    rng = make_rng(seed)
    d = src.cfg.d_model
    for j, (l, i) in enumerate(selection):
        g = l * sm.locals_per_layer + i
        q["expert.up"][n_loc + j] = p["expert.up"][g]
        q["expert.down"][n_loc + j] = p["expert.down"][g]
        q["router.universal"][:, :, j] = p["router.local"][l][:, i][None, :] + noise * rng.standard_normal((topo.num_layers, d))
        q["router.universal_bias"][:, j] = p["router.local_bias"][l][i]
    for st in dst.states.values():
        st.U = np.zeros_like(st.U)
    extra = {
        "moue.converted": "1",
        "moue.selection": ";".join(f"{l}:{i}" for l, i in selection),
        "suppression.beta0": repr(float(beta0)),
        "suppression.t_end": repr(float(t_end)),
    }
    return model_to_checkpoint(dst, extra)

