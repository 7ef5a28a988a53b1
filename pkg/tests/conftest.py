import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from moue.model import ModelConfig, MoueModel  # noqa: E402
from moue.topology import TopologyConfig, build_staggered  # noqa: E402


def tiny_topology(**kw) -> TopologyConfig:
    base = dict(num_layers=4, group_size=2, num_universal=4, window=4, stride=1,
                locals_per_layer=2, top_k=2)
    base.update(kw)
    return TopologyConfig(**base)


def tiny_model(seed=0, topo=None, **kw) -> MoueModel:
    cfg = dict(d_model=8, d_ffn=16, vocab=16, d_key=4)
    cfg.update(kw)
    return MoueModel(build_staggered(topo or tiny_topology()), ModelConfig(**cfg), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
