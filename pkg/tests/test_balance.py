import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moue.balance import (
    AlphaConfig,
    AuxObjective,
    LoadStats,
    accumulate_stats,
    aux_weights,
    calibrate_alphas,
    concatenated_switch_loss,
    group_stats,
    group_uelb_loss,
    max_mean_ratio,
    standard_lbl,
    uelb_loss,
)
from moue.numerics import make_rng
from moue.topology import TopologyConfig, build_staggered, exposure_degrees


def stats_from(f, p, layer=None):
    f, p = np.asarray(f, float), np.asarray(p, float)
    return LoadStats(f, p, np.ones(len(f), bool), 4, 1, layer)


def test_accumulate_collapse():
    st_ = accumulate_stats(np.zeros((4, 1), int), np.tile([1.0, 0, 0, 0], (4, 1)), mask=np.ones(4, bool))
    assert st_.f.tolist() == [1, 0, 0, 0]


def test_accumulate_k_normalised():
    ids = np.array([[0, 1], [0, 2]])
    probs = np.array([[0.5, 0.3, 0.2], [0.4, 0.1, 0.5]])
    st_ = accumulate_stats(ids, probs)
    assert st_.f.tolist() == [0.5, 0.25, 0.25]
    np.testing.assert_allclose(st_.p, [0.45, 0.2, 0.35])


def test_accumulate_empty():
    with pytest.raises(ValueError, match="empty batch"):
        accumulate_stats(np.zeros((0, 2), int), np.zeros((0, 3)))


@settings(max_examples=50)
@given(st.integers(1, 30), st.integers(2, 8), st.integers(0, 10_000))
def test_stats_sum_to_one(n, e, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, e + 1))
    probs = rng.dirichlet(np.ones(e), n)
    ids = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    st_ = accumulate_stats(ids, probs)
    assert abs(st_.f.sum() - 1) < 1e-9 and abs(st_.p.sum() - 1) < 1e-9
    assert np.all((0 <= st_.f) & (st_.f <= 1))


def test_uniform_router_stats_in_expectation():
    rng = make_rng(0)
    n, e = 20_000, 5
    ids = rng.integers(0, e, size=(n, 1))
    st_ = accumulate_stats(ids, np.full((n, e), 1 / e))
    np.testing.assert_allclose(st_.f, 1 / e, atol=0.01)


@pytest.mark.parametrize("f,p,expected", [
    ([0.25] * 4, [0.25] * 4, 1.0),
    ([1, 0, 0], [1, 0, 0], 3.0),
    ([0.5, 0.5], [0.75, 0.25], 1.0),
])
def test_standard_lbl_examples(f, p, expected):
    assert standard_lbl(stats_from(f, p)) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("f,expected", [([0.25] * 4, 1.0), ([1, 0, 0, 0], 4.0), ([0.5, 0.25, 0.25], 1.5)])
def test_max_mean_examples(f, expected):
    assert max_mean_ratio(stats_from(f, f)) == pytest.approx(expected, abs=1e-15)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_max_mean_at_least_one(values):
    f = np.array(values)
    if f.sum() == 0:
        return
    r = max_mean_ratio(stats_from(f, f))
    assert r >= 1 - 1e-12
    assert (abs(r - 1) < 1e-12) == bool(np.allclose(f, f[0], rtol=0, atol=0))


# -- UELB -------------------------------------------------------------------------------------

def one_ue_map(c, locals_=1):
    """A map whose single universal expert is exposed to exactly ``c`` layers."""
    return build_staggered(TopologyConfig(c, c, 1, 1, 0, locals_, 1))


def layer_stats(cmap, local_fp, ue_fp):
    out = []
    for layer in range(cmap.num_layers):
        f, p = np.zeros(cmap.num_experts), np.zeros(cmap.num_experts)
        for e in cmap.local_ids(layer):
            f[e], p[e] = local_fp
        for e in cmap.universal_ids(layer):
            f[e], p[e] = ue_fp
        out.append(LoadStats(f, p, cmap.mask[layer], 8, 1, layer))
    return out


def test_uelb_without_universal_pool():
    m = build_staggered(TopologyConfig(3, 1, 0, 0, 0, 2, 1))
    rng = make_rng(1)
    stats = []
    for l in range(3):
        f = np.zeros(6)
        p = np.zeros(6)
        f[list(m.local_ids(l))] = rng.dirichlet([1, 1])
        p[list(m.local_ids(l))] = rng.dirichlet([1, 1])
        stats.append(LoadStats(f, p, m.mask[l], 4, 1, l))
    expected = 0.7 * sum(float(np.dot(s.f, s.p)) for s in stats)
    assert uelb_loss(stats, m, AlphaConfig(0.7, 0.5)) == pytest.approx(expected, abs=1e-15)


def test_uelb_universal_term_example():
    m = one_ue_map(2, locals_=0)
    stats = layer_stats(m, (0, 0), (0.5, 0.5))
    assert uelb_loss(stats, m, AlphaConfig(1.0, 0.5)) == pytest.approx(0.125, abs=1e-15)


@pytest.mark.parametrize("c", [1, 2, 4, 8])
def test_exposure_neutrality(c):
    m = one_ue_map(c)
    fp = (0.3, 0.6)
    a = AlphaConfig(1.0, 0.5)
    total = uelb_loss(layer_stats(m, (0, 0), fp), m, a)
    local_single = 0.3 * 0.6
    assert total == pytest.approx(0.5 * local_single, abs=1e-12)
    naive = sum(s.f[m.universal_offset] * s.p[m.universal_offset] for s in layer_stats(m, (0, 0), fp))
    assert naive == pytest.approx(c * local_single, abs=1e-12)


def test_unexposed_universal_adds_nothing():
    m = build_staggered(TopologyConfig(2, 1, 4, 1, 0, 1, 1))
    assert exposure_degrees(m).tolist() == [2, 0, 0, 0]
    stats = layer_stats(m, (0.5, 0.5), (0.5, 0.5))
    for s in stats:
        s.f[m.universal_offset + 1:] = 1.0
        s.p[m.universal_offset + 1:] = 1.0
    assert uelb_loss(stats, m, AlphaConfig(1.0, 0.5)) == pytest.approx(2 * 0.25 + 0.5 * 0.25, abs=1e-15)


def test_group_scale_multiplies():
    m = one_ue_map(2)
    stats = layer_stats(m, (0.5, 0.5), (0.5, 0.5))
    base = uelb_loss(stats, m, AlphaConfig(1.0, 0.5))
    assert uelb_loss(stats, m, AlphaConfig(1.0, 0.5, 0.25)) == pytest.approx(0.25 * base, abs=1e-15)


# -- calibration ------------------------------------------------------------------------------

def test_calibration_identity_and_defaults():
    base = AlphaConfig()
    assert (base.alpha_loc, base.alpha_u) == (1.0, 0.5)
    assert calibrate_alphas(1, 4, 2, base) == base


@pytest.mark.parametrize("G", [2, 5])
def test_calibration_restores_uniform_baseline(G):
    n = 6
    stats = [stats_from([1 / n] * n, [1 / n] * n) for _ in range(G)]
    raw = concatenated_switch_loss(stats)
    assert raw == pytest.approx(G, abs=1e-12)
    assert calibrate_alphas(G, 4, 2).group_scale * raw == pytest.approx(1.0, abs=1e-12)


def test_calibration_rejects_zero_counts():
    with pytest.raises(ValueError):
        calibrate_alphas(0, 1, 1)


def test_group_stats_sum_to_one():
    stats = [stats_from([0.5, 0.25, 0.25], [0.2, 0.3, 0.5]) for _ in range(3)]
    g = group_stats(stats)
    assert len(g.f) == 9
    assert g.f.sum() == pytest.approx(1.0) and g.p.sum() == pytest.approx(1.0)


def test_alpha_validation():
    with pytest.raises(ValueError):
        AlphaConfig(-1.0, 0.5)


# -- training objectives ----------------------------------------------------------------------

def random_stats(cmap, seed):
    rng = make_rng(seed)
    out = []
    for l in range(cmap.num_layers):
        f = np.zeros(cmap.num_experts)
        p = np.zeros(cmap.num_experts)
        reach = np.flatnonzero(cmap.mask[l])
        f[reach] = rng.dirichlet(np.ones(len(reach)))
        p[reach] = rng.dirichlet(np.ones(len(reach)))
        out.append(LoadStats(f, p, cmap.mask[l], 16, 2, l))
    return out


STAG = TopologyConfig(6, 3, 6, 3, 2, 2, 2)


def test_training_uelb_matches_group_form():
    m = build_staggered(STAG)
    stats = random_stats(m, 0)
    loss, _ = AuxObjective(m, "uelb")(stats)
    assert loss == pytest.approx(group_uelb_loss(stats, m), rel=1e-12)
    # with equal group sizes the group form is a fixed multiple of the plain loss
    n, G = 2 + 3, 3
    assert loss == pytest.approx(n / G * uelb_loss(stats, m), rel=1e-12)


def test_uniform_training_uelb_value():
    m = build_staggered(STAG)
    assert exposure_degrees(m).tolist() == [3, 3, 6, 3, 3, 0]
    stats = []
    for l in range(m.num_layers):
        f = m.mask[l] / m.mask[l].sum()
        stats.append(LoadStats(f, f.copy(), m.mask[l], 16, 2, l))
    loss, _ = AuxObjective(m, "uelb", AlphaConfig(1.0, 1.0))(stats)
    # every layer: n/layers_in_group * (2 locals + sum of 1/exposure over its window) / n^2, n = 5, 3 layers per group
    per_layer = (5 / 3) * (2 + 1 / 3 + 1 / 3 + 1 / 6) / 25
    assert loss == pytest.approx(6 * per_layer, rel=1e-12)


@pytest.mark.parametrize("objective", ["uelb", "standard_lbl"])
def test_objective_gradients_match_finite_differences(objective):
    m = build_staggered(STAG)
    stats = random_stats(m, 3)
    obj = AuxObjective(m, objective)
    _, grads = obj(stats)
    eps = 1e-6
    for l in range(m.num_layers):
        for e in np.flatnonzero(m.mask[l]):
            old = stats[l].p[e]
            stats[l].p[e] = old + eps
            up, _ = obj(stats)
            stats[l].p[e] = old - eps
            dn, _ = obj(stats)
            stats[l].p[e] = old
            num = (up - dn) / (2 * eps)
            assert abs(num - grads[l][e]) <= 1e-5 * max(abs(num), abs(grads[l][e]), 1e-8)


def test_standard_objective_penalises_exposure():
    """Per-exposure pressure on a universal expert grows with the layers sharing it."""
    m = build_staggered(STAG)
    stats = []
    for l in range(m.num_layers):
        f = m.mask[l] / m.mask[l].sum()
        stats.append(LoadStats(f, f.copy(), m.mask[l], 16, 2, l))
    _, g_std = AuxObjective(m, "standard_lbl")(stats)
    _, g_uelb = AuxObjective(m, "uelb")(stats)
    loc, ue = m.local_ids(0)[0], m.universal_ids(0)[0]
    assert g_std[0][ue] / g_std[0][loc] == pytest.approx(3.0)
    assert g_uelb[0][ue] < g_uelb[0][loc]


def test_unknown_objective():
    with pytest.raises(ValueError):
        AuxObjective(build_staggered(STAG), "zloss")


def test_aux_weights_zero_off_mask():
    m = build_staggered(STAG)
    w = aux_weights(m)
    assert np.all(w[~m.mask] == 0)
