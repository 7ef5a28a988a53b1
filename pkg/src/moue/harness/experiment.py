"""Experiment runners behind the CLI subcommands.

Each runner takes a validated :class:`ExperimentConfig` and an output
directory, writes its reports and returns the in-memory results so tests can
inspect them without re-reading files.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import balance
from ..checkpoint import read_checkpoint, write_checkpoint
from ..cka import cka_matrix
from ..model import MoueModel, train_step
from ..numerics import make_rng
from ..topology import (
    TopologyError,
    build_variant,
    path_count_exact,
    path_count_log,
)
from ..warmstart import (
    collect_activation_profile,
    convert_to_moue,
    model_from_checkpoint,
    model_to_checkpoint,
    select_universal_experts,
)
from . import reports
from .config import ExperimentConfig
from .corpus import SyntheticCorpus

# Independent streams derived from the run seed.
STREAM_BATCHES = 1
STREAM_EVAL = 2
STREAM_CALIBRATION = 3


def stream_seed(seed: int, stream: int) -> int:
    return (int(seed) * 1_000_003 + stream) & 0xFFFFFFFFFFFFFFFF


def corpus_for(cfg: ExperimentConfig, vocab: int | None = None) -> SyntheticCorpus:
    return SyntheticCorpus(vocab or cfg["model.vocab"], cfg["data.domains"], cfg["data.seed"],
                           cfg["data.concentration"])


def ue_share(model: MoueModel, res) -> float:
    """Fraction of all routed slots that landed on universal experts."""
    off = model.cmap.universal_offset
    total = sum(c.ids.size for c in res.caches)
    return float(sum(int((c.ids >= off).sum()) for c in res.caches) / total)


def group_ratios(cmap, stats) -> list[float]:
    """Max/Mean over the concatenated exposures of each state group."""
    out = []
    for g in sorted(set(cmap.state_groups)):
        gs = balance.group_stats([stats[l] for l in cmap.group_layers(g)])
        out.append(balance.max_mean_ratio(gs))
    return out


def mean_stats(cmap, runs: list[list[balance.LoadStats]]) -> list[balance.LoadStats]:
    """Average per-layer stats over several equally sized batches."""
    out = []
    for layer in range(cmap.num_layers):
        per = [r[layer] for r in runs]
        out.append(balance.LoadStats(
            f=np.mean([s.f for s in per], axis=0), p=np.mean([s.p for s in per], axis=0),
            mask=per[0].mask, n_tokens=sum(s.n_tokens for s in per), top_k=per[0].top_k,
            layer=layer))
    return out


@dataclass
class TrainResult:
    model: MoueModel
    losses: list = field(default_factory=list)
    skew: list = field(default_factory=list)
    final_stats: list = field(default_factory=list)
    terminal_ratios: list = field(default_factory=list)
    selections: list = field(default_factory=list)


def build_model(cfg: ExperimentConfig) -> MoueModel:
    init = cfg["train.init"]
    if init:
        return model_from_checkpoint(read_checkpoint(init))
    cmap = build_variant(cfg["topology.variant"], cfg.topology())
    return MoueModel(cmap, cfg.model(), seed=cfg["seed"], schedules=cfg.schedules())


def run_train(cfg: ExperimentConfig, out: Path | None, keep_selections: bool = False) -> TrainResult:
    model = build_model(cfg)
    tc = cfg.train()
    corpus = corpus_for(cfg, model.cfg.vocab)
    rng = make_rng(stream_seed(cfg["seed"], STREAM_BATCHES))
    aux = balance.AuxObjective(model.cmap, tc.objective, tc.alphas)
    result = TrainResult(model)
    velocity: dict = {}
    every = cfg["train.skew_every"]
    for step in range(tc.steps):
        tokens, _ = corpus.sample(tc.batch, tc.seq_len, rng)
        t = step / tc.steps
        res = train_step(model, tokens, tc, t, velocity, aux)
        result.losses.append((step, res.task_loss, res.aux_loss, ue_share(model, res)))
        if keep_selections:
            result.selections.append(res.selections())
        if step % every == 0 or step == tc.steps - 1:
            for g, r in enumerate(group_ratios(model.cmap, res.stats)):
                result.skew.append((step, g, r))

    erng = make_rng(stream_seed(cfg["seed"], STREAM_EVAL))
    runs = []
    for _ in range(cfg["data.eval_batches"]):
        tokens, _ = corpus.sample(tc.batch, tc.seq_len, erng)
        runs.append(model.forward(tokens, 1.0).stats)
    result.final_stats = mean_stats(model.cmap, runs)
    result.terminal_ratios = group_ratios(model.cmap, result.final_stats)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        reports.write_rows(out / "loss_curve.csv", reports.LOSS_HEADER, result.losses)
        reports.write_rows(out / "skew_trace.csv", reports.SKEW_HEADER, result.skew)
        reports.write_matrix(out / "heatmap.csv", "layer", np.stack([s.f for s in result.final_stats]))
        reports.write_budget(out / "budget.csv", model.budget())
        extra = {"train.progress": "1.0", "train.seed": str(cfg["seed"]),
                 "train.objective": tc.objective}
        write_checkpoint(out / "model.ckpt", model_to_checkpoint(model, extra))
    return result


def run_topo(cfg: ExperimentConfig, out: Path) -> dict:
    tcfg = cfg.topology()
    cmap = build_variant(cfg["topology.variant"], tcfg)
    try:
        log_paths = path_count_log(cmap, tcfg.top_k)
        exact = path_count_exact(cmap, tcfg.top_k)
    except TopologyError:
        log_paths, exact = float("-inf"), 0
    budget = MoueModel(cmap, cfg.model(), seed=cfg["seed"]).budget()
    out.mkdir(parents=True, exist_ok=True)
    reports.write_connectivity(out / "connectivity.csv", cmap)
    reports.write_exposure(out / "exposure.csv", cmap)
    reports.write_pathcount(out / "pathcount.txt", log_paths, exact)
    reports.write_budget(out / "budget.csv", budget)
    reports.write_group_masks(out / "group_masks.csv", cmap)
    return {"map": cmap, "log_paths": log_paths, "paths": exact, "budget": budget}


def run_convert(src: Path, cfg: ExperimentConfig, out: Path) -> dict:
    ckpt = read_checkpoint(src)
    moe = model_from_checkpoint(ckpt)
    tcfg = cfg.topology()
    out.mkdir(parents=True, exist_ok=True)
    if tcfg.num_universal == 0:
        print("warning: num_universal=0, writing a passthrough copy", file=sys.stderr)
        converted = convert_to_moue(ckpt, tcfg, [])
        write_checkpoint(out / "model.ckpt", converted)
        reports.write_rows(out / "selection.csv", ["rank", "layer", "expert", "rate", "universal_id"], [])
        return {"selection": [], "checkpoint": converted}
    corpus = corpus_for(cfg, moe.cfg.vocab)
    seq = cfg["train.seq_len"]
    rows = -(-cfg["convert.calibration_tokens"] // seq)
    tokens, _ = corpus.sample(rows, seq, make_rng(stream_seed(cfg["seed"], STREAM_CALIBRATION)))
    profile = collect_activation_profile(moe, tokens)
    lo, hi = cfg["convert.band_lo"], cfg["convert.band_hi"]
    band = None if lo < 0 or hi < 0 else (lo, hi)
    selection = select_universal_experts(profile, tcfg.num_universal, band)
    converted = convert_to_moue(
        ckpt, tcfg, selection, variant=cfg["topology.variant"],
        beta0=cfg["schedule.suppression_beta0"], t_end=cfg["schedule.suppression_t_end"],
        noise=cfg["convert.noise"], seed=cfg["seed"])
    converted.metadata["train.progress"] = "0.0"
    write_checkpoint(out / "model.ckpt", converted)
    off = tcfg.num_layers * tcfg.locals_per_layer
    table = [(r, l, i, float(profile.rates[l, i]), off + r) for r, (l, i) in enumerate(selection)]
    reports.write_rows(out / "selection.csv", ["rank", "layer", "expert", "rate", "universal_id"], table)
    print("rank layer expert rate universal_id")
    for r, l, i, rate, uid in table:
        print(f"{r:4d} {l:5d} {i:6d} {rate:.4f} {uid:12d}")
    return {"selection": selection, "checkpoint": converted, "profile": profile}


def _ue_masses(model: MoueModel, res) -> tuple[np.ndarray, np.ndarray]:
    off = model.cmap.universal_offset
    gate = np.array([float((c.gates * (c.ids >= off)).sum() / len(c.ids)) for c in res.caches])
    prob = np.array([float(c.probs[:, off:].sum() / len(c.probs)) for c in res.caches])
    return gate, prob


def run_analyze(src: Path, cfg: ExperimentConfig, out: Path) -> dict:
    ckpt = read_checkpoint(src)
    model = model_from_checkpoint(ckpt)
    t = float(ckpt.metadata.get("train.progress", "1.0"))
    corpus = corpus_for(cfg, model.cfg.vocab)
    erng = make_rng(stream_seed(cfg["seed"], STREAM_EVAL))
    E = model.cmap.num_experts
    cka = cka_matrix([model.expert(i) for i in range(E)])
    runs, gates, probs = [], [], []
    n_dom = cfg["data.domains"]
    dom_sum = np.zeros((n_dom, model.cmap.num_layers))
    dom_cnt = np.zeros(n_dom)
    for _ in range(cfg["data.eval_batches"]):
        tokens, domains = corpus.sample(cfg["train.batch"], cfg["train.seq_len"], erng)
        res = model.forward(tokens, t)
        runs.append(res.stats)
        g, p = _ue_masses(model, res)
        gates.append(g)
        probs.append(p)
        for dom in np.unique(domains):
            sub = model.forward(tokens[domains == dom], t)
            dom_sum[dom] += _ue_masses(model, sub)[0] * np.sum(domains == dom)
            dom_cnt[dom] += np.sum(domains == dom)
    stats = mean_stats(model.cmap, runs)
    ue_gate, ue_prob = np.mean(gates, axis=0), np.mean(probs, axis=0)
    dom_rows = [(dmn, l, dom_sum[dmn, l] / dom_cnt[dmn])
                for dmn in range(n_dom) if dom_cnt[dmn] for l in range(model.cmap.num_layers)]
    out.mkdir(parents=True, exist_ok=True)
    reports.write_matrix(out / "cka_matrix.csv", "expert", cka)
    reports.write_rows(out / "ue_ratio_per_layer.csv", reports.UE_RATIO_HEADER,
                       ([l, ue_gate[l], ue_prob[l]] for l in range(model.cmap.num_layers)))
    reports.write_matrix(out / "heatmap.csv", "layer", np.stack([s.f for s in stats]))
    reports.write_rows(out / "domain_ue_activation.csv", reports.DOMAIN_HEADER, dom_rows)
    return {"cka": cka, "ue_gate": ue_gate, "ue_prob": ue_prob, "stats": stats}
