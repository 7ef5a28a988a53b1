"""A tiny MoUE language model with hand-written reverse-mode gradients.

Each block is a fixed residual causal mean-pooling mixer, ``u = h + mix * causal_mean(h)``,
followed by a routed expert layer ``h' = u + sum_i gate_i * E_i(u)``.  Experts
are two-matrix SiLU FFNs stored in one global array indexed by global expert
ID, so a universal expert has exactly one copy of its weights no matter how
many layers reach it; gradients from every exposure accumulate into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import balance
from .numerics import causal_mean, causal_mean_backward, make_rng, silu, silu_grad
from .routing import (
    BiasSchedule,
    FastWeightState,
    RouterParams,
    Selection,
    compute_logits,
    route,
    universal_targets,
)
from .topology import ConnectivityMap, ModelDims, parameter_budget

PARAM_NAMES = (
    "embedding",
    "readout",
    "expert.up",
    "expert.down",
    "router.local",
    "router.local_bias",
    "router.universal",
    "router.universal_bias",
    "router.key",
)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class ExpertParams:
    up: np.ndarray
    down: np.ndarray


def expert_forward(e: ExpertParams, x: np.ndarray) -> np.ndarray:
    return silu(np.asarray(x) @ e.up) @ e.down


@dataclass
class ModelConfig:
    d_model: int = 16
    d_ffn: int = 32
    vocab: int = 32
    d_key: int = 8
    top_k: int = 2
    beta: float = 0.1
    eta: float = 0.1
    eta_decay: bool = False
    fast_weights: bool = True
    hard_targets: bool = False
    init_scale: float = 1.0
    mix: float = 0.1

    def dims(self) -> ModelDims:
        return ModelDims(self.d_model, self.d_ffn, self.vocab, self.d_key, self.top_k)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    seq_len: int = 16
    lr: float = 0.03
    momentum: float = 0.9
    clip: float = 1.0
    seed: int = 0
    aux_coef: float = 1e-3
    objective: str = "uelb"
    alphas: balance.AlphaConfig = field(default_factory=balance.AlphaConfig)


@dataclass
class LayerCache:
    h: np.ndarray
    params: RouterParams
    ids: np.ndarray
    gates: np.ndarray
    probs: np.ndarray
    keys: np.ndarray | None
    per_expert: dict


@dataclass
class ForwardResult:
    task_loss: float
    aux_loss: float
    stats: list
    logits: np.ndarray
    caches: list = field(default_factory=list)
    final_h: np.ndarray | None = None
    aux_grads: list | None = None

    @property
    def total(self) -> float:
        return self.task_loss + self.aux_loss

    def selections(self) -> list[np.ndarray]:
        return [c.ids for c in self.caches]


class MoueModel:
    def __init__(self, cmap: ConnectivityMap, cfg: ModelConfig, seed: int = 0,
                 schedules: list[BiasSchedule] | None = None):
        self.cmap = cmap
        self.cfg = cfg
        self.schedules = list(schedules or [])
        self.params = self._init_params(seed)
        self.states = self._init_states()

    # -- construction -----------------------------------------------------------------

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        c, m = self.cfg, self.cmap
        rng = make_rng(seed)
        d, f, V, L = c.d_model, c.d_ffn, c.vocab, m.num_layers
        s = c.init_scale
        return {
            "embedding": rng.standard_normal((V, d)) * s * 0.3,
            "readout": rng.standard_normal((d, V)) * s / np.sqrt(d),
            "expert.up": rng.standard_normal((m.num_experts, d, f)) * s / np.sqrt(d),
            "expert.down": rng.standard_normal((m.num_experts, f, d)) * s * 0.1 / np.sqrt(f),
            "router.local": rng.standard_normal((L, d, m.locals_per_layer)) * s * 0.5,
            "router.local_bias": np.zeros((L, m.locals_per_layer)),
            "router.universal": rng.standard_normal((L, d, m.num_universal)) * s * 0.5,
            "router.universal_bias": np.zeros((L, m.num_universal)),
            "router.key": rng.standard_normal((L, d, c.d_key)) * s / np.sqrt(d),
        }

    def _init_states(self) -> dict[int, FastWeightState]:
        states = {}
        for g in sorted(set(self.cmap.state_groups)):
            layers = self.cmap.group_layers(g)
            width = len(self.cmap.windows[layers[0]])
            if width:
                states[g] = FastWeightState(np.zeros((width, self.cfg.d_key)), self.eta_for(g))
        return states

    def eta_for(self, group: int) -> float:
        if not self.cfg.eta_decay:
            return self.cfg.eta
        first = self.cmap.group_layers(group)[0]
        return self.cfg.eta / (1 + self.cmap.block_groups[first])

    # -- views --------------------------------------------------------------------------

    def expert(self, expert_id: int) -> ExpertParams:
        """Views into the shared expert storage; writes are seen by every layer."""
        return ExpertParams(self.params["expert.up"][expert_id], self.params["expert.down"][expert_id])

    def layer_experts(self, layer: int) -> dict[int, ExpertParams]:
        return {i: self.expert(i) for i in self.cmap.allow_list(layer)}

    def router_params(self, layer: int) -> RouterParams:
        m, p = self.cmap, self.params
        d = self.cfg.d_model
        w = np.zeros((d, m.num_experts))
        b = np.zeros(m.num_experts)
        loc = slice(layer * m.locals_per_layer, (layer + 1) * m.locals_per_layer)
        w[:, loc] = p["router.local"][layer]
        b[loc] = p["router.local_bias"][layer]
        w[:, m.universal_offset:] = p["router.universal"][layer]
        b[m.universal_offset:] = p["router.universal_bias"][layer]
        return RouterParams(w, b, p["router.key"][layer], self.cfg.beta)

    def state_for(self, layer: int) -> FastWeightState | None:
        return self.states.get(self.cmap.state_groups[layer])

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def budget(self):
        return parameter_budget(self.cfg.dims(), self.cmap)

    def copy(self) -> "MoueModel":
        other = MoueModel.__new__(MoueModel)
        other.cmap = self.cmap
        other.cfg = self.cfg
        other.schedules = list(self.schedules)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.states = {g: FastWeightState(s.U.copy(), s.eta) for g, s in self.states.items()}
        return other

    # -- forward ------------------------------------------------------------------------

    def layer_forward(self, h: np.ndarray, layer: int, t: float = 0.0):
        """Routed expert layer on a token matrix (N, d).  Returns (h_next, cache)."""
        if not np.all(np.isfinite(h)):
            raise DivergenceError("diverged")
        rp = self.router_params(layer)
        z = compute_logits(h, layer, rp, self.state_for(layer), self.cmap, self.schedules, t)
        ids, gates, probs = route(z, self.cfg.top_k)
        out = h.copy()
        up, down = self.params["expert.up"], self.params["expert.down"]
        per_expert = {}
        for e in np.unique(ids):
            rows, slots = np.nonzero(ids == e)
            x = h[rows]
            a = x @ up[e]
            hid = silu(a)
            y = hid @ down[e]
            out[rows] += gates[rows, slots][:, None] * y
            per_expert[int(e)] = (rows, slots, a, hid, y)
        keys = h @ rp.w_k if self.cmap.windows[layer] else None
        return out, LayerCache(h, rp, ids, gates, probs, keys, per_expert)

    def forward(self, tokens: np.ndarray, t: float = 0.0, aux: balance.AuxObjective | None = None,
                aux_coef: float = 0.0) -> ForwardResult:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, T = tokens.shape
        d = self.cfg.d_model
        h = self.params["embedding"][tokens]
        caches, stats = [], []
        for layer in range(self.cmap.num_layers):
            u = h + self.cfg.mix * causal_mean(h)
            out, cache = self.layer_forward(u.reshape(B * T, d), layer, t)
            caches.append(cache)
            stats.append(balance.accumulate_stats(cache.ids, cache.probs, layer, self.cmap.mask[layer]))
            h = out.reshape(B, T, d)
        logits = h @ self.params["readout"]
        pred = logits[:, :-1]
        targets = tokens[:, 1:]
        zmax = pred.max(axis=-1, keepdims=True)
        lse = zmax[..., 0] + np.log(np.exp(pred - zmax).sum(axis=-1))
        picked = np.take_along_axis(pred, targets[..., None], axis=-1)[..., 0]
        task = float(np.mean(lse - picked)) if targets.size else 0.0
        aux_value, aux_grads = 0.0, None
        if aux is not None and aux_coef:
            aux_value, aux_grads = aux(stats)
            aux_value *= aux_coef
        return ForwardResult(task, aux_value, stats, logits, caches, h, aux_grads)

    # -- backward -----------------------------------------------------------------------

    def backward(self, tokens: np.ndarray, res: ForwardResult, aux_coef: float = 0.0) -> dict[str, np.ndarray]:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, T = tokens.shape
        d = self.cfg.d_model
        m = self.cmap
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}

        pred = res.logits[:, :-1]
        n_pred = pred.shape[0] * pred.shape[1]
        dlogits = np.zeros_like(res.logits)
        if n_pred:
            p = np.exp(pred - pred.max(axis=-1, keepdims=True))
            p /= p.sum(axis=-1, keepdims=True)
            np.put_along_axis(p, tokens[:, 1:, None], np.take_along_axis(p, tokens[:, 1:, None], -1) - 1.0, -1)
            dlogits[:, :-1] = p / n_pred
        grads["readout"] = np.einsum("btd,btv->dv", res.final_h, dlogits)
        dh = dlogits @ self.params["readout"].T

        up, down = self.params["expert.up"], self.params["expert.down"]
        for layer in reversed(range(m.num_layers)):
            c = res.caches[layer]
            dout = dh.reshape(B * T, d)
            du = dout.copy()
            N, k = c.ids.shape
            dgate = np.zeros((N, k))
            for e, (rows, slots, a, hid, y) in c.per_expert.items():
                g = c.gates[rows, slots]
                do = dout[rows]
                dgate[rows, slots] = np.sum(do * y, axis=1)
                dy = g[:, None] * do
                grads["expert.down"][e] += hid.T @ dy
                da = (dy @ down[e].T) * silu_grad(a)
                grads["expert.up"][e] += c.h[rows].T @ da
                du[rows] += da @ up[e].T
            picked = np.take_along_axis(c.probs, c.ids, axis=1)
            tot = picked.sum(axis=1, keepdims=True)
            dpicked = (dgate - np.sum(dgate * c.gates, axis=1, keepdims=True)) / tot
            dprobs = np.zeros_like(c.probs)
            if res.aux_grads is not None and aux_coef:
                dprobs += (aux_coef * res.aux_grads[layer] / N)[None, :]
            dprobs[np.arange(N)[:, None], c.ids] += dpicked
            dz = c.probs * (dprobs - np.sum(c.probs * dprobs, axis=1, keepdims=True))
            dW = c.h.T @ dz
            db = dz.sum(axis=0)
            loc = slice(layer * m.locals_per_layer, (layer + 1) * m.locals_per_layer)
            grads["router.local"][layer] += dW[:, loc]
            grads["router.local_bias"][layer] += db[loc]
            grads["router.universal"][layer] += dW[:, m.universal_offset:]
            grads["router.universal_bias"][layer] += db[m.universal_offset:]
            du += dz @ c.params.w_g.T
            uni = list(m.universal_ids(layer))
            state = self.state_for(layer)
            if uni and c.params.beta != 0.0 and state is not None:
                dkey = c.params.beta * (dz[:, uni] @ state.U)
                grads["router.key"][layer] += c.h.T @ dkey
                du += dkey @ c.params.w_k.T
            du = du.reshape(B, T, d)
            dh = du + self.cfg.mix * causal_mean_backward(du)
        np.add.at(grads["embedding"], tokens, dh)
        return grads

    # -- fast weights -------------------------------------------------------------------

    def update_fast_weights(self, res: ForwardResult) -> None:
        """Single forward-only update per state group from a finished forward pass."""
        if not self.cfg.fast_weights or self.cfg.beta == 0.0:
            return
        for g, state in self.states.items():
            Ks, Ps = [], []
            for layer in self.cmap.group_layers(g):
                c = res.caches[layer]
                tgt, keep = universal_targets(c.probs, c.ids, self.cmap.universal_ids(layer),
                                              hard=self.cfg.hard_targets)
                Ks.append(c.keys[keep])
                Ps.append(tgt[keep])
            K = np.concatenate(Ks)
            if len(K):
                state.update(K, np.concatenate(Ps))


def moue_layer_forward(h: np.ndarray, layer: int, model: MoueModel, t: float = 0.0):
    """Returns (h_next, selections, probs) for one routed layer on a token matrix."""
    out, c = model.layer_forward(np.asarray(h, dtype=np.float64), layer, t)
    sels = [Selection(c.ids[n], c.gates[n]) for n in range(len(c.ids))]
    return out, sels, c.probs


def forward_loss(model: MoueModel, tokens, t: float = 0.0):
    """Task cross-entropy and per-layer load stats."""
    res = model.forward(tokens, t)
    return res.task_loss, res.stats


def train_step(model: MoueModel, tokens, cfg: TrainConfig, t: float = 0.0,
               velocity: dict | None = None, aux: balance.AuxObjective | None = None):
    """SGD (+momentum, global-norm clipping) on task + aux loss, then the fast-weight update."""
    if aux is None:
        aux = balance.AuxObjective(model.cmap, cfg.objective, cfg.alphas)
    res = model.forward(tokens, t, aux, cfg.aux_coef)
    if not np.isfinite(res.total):
        raise DivergenceError("diverged")
    grads = model.backward(tokens, res, cfg.aux_coef)
    sq = sum(float(np.sum(g * g)) for g in grads.values())
    if not np.isfinite(sq):
        raise DivergenceError("divergence")
    if cfg.clip and sq > cfg.clip ** 2:
        scale = cfg.clip / np.sqrt(sq)
        grads = {k: g * scale for k, g in grads.items()}
    for name, g in grads.items():
        if velocity is not None and cfg.momentum:
            v = velocity.setdefault(name, np.zeros_like(g))
            v *= cfg.momentum
            v += g
            g = v
        model.params[name] -= cfg.lr * g
    model.update_fast_weights(res)
    return res


def backward_step(model: MoueModel, tokens, cfg: TrainConfig, t: float = 0.0, velocity=None):
    res = train_step(model, tokens, cfg, t, velocity)
    return model, {"task_loss": res.task_loss, "aux_loss": res.aux_loss, "stats": res.stats}


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    checked: int
    skipped: int
    per_tensor: dict


def grad_check(model: MoueModel, tokens, epsilon: float = 1e-5, samples: int = 64,
               objective: str = "uelb", aux_coef: float = 1e-3, t: float = 0.0,
               alphas: balance.AlphaConfig = balance.AlphaConfig(), seed: int = 0,
               floor: float = 1e-8) -> GradCheckReport:
    """Central finite differences against the analytic gradient.

    Coordinates whose +/- epsilon perturbation changes any top-k selection are
    skipped.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    aux = balance.AuxObjective(model.cmap, objective, alphas)
    base = model.forward(tokens, t, aux, aux_coef)
    analytic = model.backward(tokens, base, aux_coef)
    base_sel = base.selections()
    rng = make_rng(seed)
    worst, worst_abs, checked, skipped = 0.0, 0.0, 0, 0
    per_tensor = {}
    for name in PARAM_NAMES:
        arr = model.params[name]
        if arr.size == 0:
            continue
        n = min(samples, arr.size)
        coords = rng.choice(arr.size, size=n, replace=False)
        flat = arr.reshape(-1)
        t_worst = 0.0
        for idx in coords:
            old = flat[idx]
            flat[idx] = old + epsilon
            plus = model.forward(tokens, t, aux, aux_coef)
            flat[idx] = old - epsilon
            minus = model.forward(tokens, t, aux, aux_coef)
            flat[idx] = old
            if any(not np.array_equal(a, b) for s in (plus, minus)
                   for a, b in zip(s.selections(), base_sel)):
                skipped += 1
                continue
            num = (plus.total - minus.total) / (2 * epsilon)
            ana = analytic[name].reshape(-1)[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst_abs = max(worst_abs, abs(ana - num))
            t_worst = max(t_worst, err)
            checked += 1
        per_tensor[name] = t_worst
        worst = max(worst, t_worst)
    return GradCheckReport(worst, worst_abs, checked, skipped, per_tensor)
