"""``key=value`` experiment configuration.

One entry per line, ``#`` starts a comment, blank lines are ignored.  Every
key has a typed default below; unknown keys and unparsable values are
rejected with :class:`ConfigError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..balance import OBJECTIVES, AlphaConfig
from ..model import ModelConfig, TrainConfig
from ..routing import BiasSchedule, suppression, warmup
from ..topology import VARIANTS, TopologyConfig


class ConfigError(ValueError):
    pass


# key -> (default, description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (0, "model init and batch sampling seed"),
    "output.dir": ("out", "directory for reports and checkpoints"),
    "topology.variant": ("staggered", "one of " + ", ".join(VARIANTS)),
    "topology.num_layers": (10, "number of routed layers"),
    "topology.group_size": (5, "layers per connectivity group"),
    "topology.num_universal": (8, "universal ring size"),
    "topology.window": (4, "universal window per layer"),
    "topology.stride": (2, "window shift between groups"),
    "topology.locals_per_layer": (2, "layer-local experts per layer"),
    "topology.top_k": (2, "experts selected per token"),
    "model.d_model": (16, "hidden width"),
    "model.d_ffn": (32, "expert hidden width"),
    "model.vocab": (32, "vocabulary size (<= 64)"),
    "model.d_key": (8, "router key width"),
    "model.init_scale": (1.0, "multiplier on all init scales"),
    "model.mix": (0.1, "weight of the causal mean mixer"),
    "router.beta": (0.1, "contextual pathway weight"),
    "router.eta": (0.1, "fast-weight step size"),
    "router.eta_decay": (False, "divide eta by 1 + group index"),
    "router.fast_weights": (True, "apply the forward-only state update"),
    "router.hard_targets": (False, "use the hard routing map as update target"),
    "balance.alpha_loc": (1.0, "UELB weight on local experts"),
    "balance.alpha_u": (0.5, "UELB weight on universal experts"),
    "train.steps": (2000, "optimizer steps"),
    "train.batch": (8, "sequences per batch"),
    "train.seq_len": (16, "tokens per sequence"),
    "train.lr": (0.03, "SGD learning rate"),
    "train.momentum": (0.9, "SGD momentum"),
    "train.clip": (1.0, "global gradient-norm clip, 0 disables"),
    "train.aux_coef": (1e-3, "auxiliary loss coefficient"),
    "train.objective": ("uelb", "one of " + ", ".join(OBJECTIVES)),
    "train.skew_every": (50, "steps between skew_trace rows"),
    "train.init": ("", "optional checkpoint to start from instead of a fresh model"),
    "schedule.warmup": (True, "add the UELB warmup bias to universal logits"),
    "schedule.warmup_b0": (0.75, "warmup bias at t = 0"),
    "schedule.warmup_r": (0.05, "warmup length as a fraction of training"),
    "schedule.suppression_beta0": (1e4, "warm-start suppression bias at t = 0"),
    "schedule.suppression_t_end": (0.5, "fraction of training until suppression reaches 0"),
    "data.seed": (0, "seed of the corpus transition tables"),
    "data.domains": (3, "number of Markov domains"),
    "data.concentration": (0.1, "Dirichlet concentration of transition rows"),
    "data.eval_batches": (4, "held-out batches for heatmaps and analysis"),
    "convert.band_lo": (-1, "first layer of the selection band, -1 for the middle third"),
    "convert.band_hi": (-1, "end (exclusive) of the selection band, -1 for the middle third"),
    "convert.calibration_tokens": (512, "tokens used for the activation profile"),
    "convert.noise": (1e-3, "noise scale on copied universal router columns"),
}


def _coerce(key: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None
    return text


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: v for k, (v, _) in DEFAULTS.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, text) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        default = DEFAULTS[key][0]
        self.values[key] = text if not isinstance(text, str) else _coerce(key, default, text)

    # -- typed views -----------------------------------------------------------

    def topology(self) -> TopologyConfig:
        v = self.values
        return TopologyConfig(
            num_layers=v["topology.num_layers"],
            group_size=v["topology.group_size"],
            num_universal=v["topology.num_universal"],
            window=v["topology.window"],
            stride=v["topology.stride"],
            locals_per_layer=v["topology.locals_per_layer"],
            top_k=v["topology.top_k"],
        )

    def model(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            d_model=v["model.d_model"], d_ffn=v["model.d_ffn"], vocab=v["model.vocab"],
            d_key=v["model.d_key"], top_k=v["topology.top_k"], beta=v["router.beta"],
            eta=v["router.eta"], eta_decay=v["router.eta_decay"],
            fast_weights=v["router.fast_weights"], hard_targets=v["router.hard_targets"],
            init_scale=v["model.init_scale"], mix=v["model.mix"],
        )

    def alphas(self) -> AlphaConfig:
        return AlphaConfig(self.values["balance.alpha_loc"], self.values["balance.alpha_u"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            steps=v["train.steps"], batch=v["train.batch"], seq_len=v["train.seq_len"],
            lr=v["train.lr"], momentum=v["train.momentum"], clip=v["train.clip"],
            seed=v["seed"], aux_coef=v["train.aux_coef"], objective=v["train.objective"],
            alphas=self.alphas(),
        )

    def schedules(self) -> list[BiasSchedule]:
        v = self.values
        if not v["schedule.warmup"]:
            return []
        return [warmup(v["schedule.warmup_b0"], v["schedule.warmup_r"])]

    def suppression(self) -> BiasSchedule:
        v = self.values
        return suppression(v["schedule.suppression_beta0"], v["schedule.suppression_t_end"])

    def validate(self) -> None:
        v = self.values
        if v["topology.variant"] not in VARIANTS:
            raise ConfigError(f"unknown topology.variant {v['topology.variant']!r}")
        if v["train.objective"] not in OBJECTIVES:
            raise ConfigError(f"unknown train.objective {v['train.objective']!r}")
        for key in ("train.steps", "train.batch", "train.seq_len", "train.skew_every",
                    "model.d_model", "model.d_ffn", "model.d_key", "data.domains",
                    "data.eval_batches", "convert.calibration_tokens"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if not 1 <= v["model.vocab"] <= 64:
            raise ConfigError("model.vocab must be in [1, 64]")
        if v["train.seq_len"] < 2:
            raise ConfigError("train.seq_len must be >= 2")
        for key in ("train.lr", "train.momentum", "train.clip", "train.aux_coef", "router.beta",
                    "router.eta", "balance.alpha_loc", "balance.alpha_u"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0")


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    return parse_config(Path(path).read_text(encoding="utf-8"))


def describe() -> str:
    """All keys with defaults, in config syntax."""
    lines = []
    for key, (default, doc) in DEFAULTS.items():
        val = ("true" if default else "false") if isinstance(default, bool) else default
        lines.append(f"# {doc}\n{key}={val}")
    return "\n".join(lines) + "\n"
