import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_topology
from moue.numerics import make_rng, softmax_rows
from moue.routing import (
    BiasSchedule,
    FastWeightState,
    RouterParams,
    RoutingError,
    compute_logits,
    fast_weight_update,
    route,
    schedule_value,
    select_experts,
    suppression,
    universal_targets,
    warmup,
)
from moue.topology import TopologyConfig, build_staggered, build_variant


def router(cmap, d=6, dk=3, beta=0.1, seed=0):
    rng = make_rng(seed)
    return RouterParams(rng.normal(size=(d, cmap.num_experts)), rng.normal(size=cmap.num_experts),
                        rng.normal(size=(d, dk)), beta)


def state_for(cmap, layer, dk=3, seed=1):
    return FastWeightState(make_rng(seed).normal(size=(len(cmap.windows[layer]), dk)))


# -- logits -----------------------------------------------------------------------------------

def test_stateless_logits_are_affine():
    m = build_staggered(tiny_topology(num_universal=6, window=3))
    p = router(m, beta=0.0)
    h = make_rng(3).normal(size=6)
    z = compute_logits(h, 1, p, None, m)
    reach = m.mask[1]
    np.testing.assert_array_equal(z[reach], (h @ p.w_g + p.b_g)[reach])
    assert np.all(z[~reach] == -np.inf)


def test_zero_state_adds_nothing():
    m = build_staggered(tiny_topology())
    p = router(m)
    h = make_rng(3).normal(size=(5, 6))
    z0 = compute_logits(h, 0, RouterParams(p.w_g, p.b_g, p.w_k, 0.0), None, m)
    z1 = compute_logits(h, 0, p, FastWeightState(np.zeros((4, 3))), m)
    np.testing.assert_array_equal(z0, z1)


def test_contextual_term_on_universal_columns_only():
    m = build_staggered(tiny_topology(num_universal=6, window=3))
    p = router(m, beta=0.5)
    st_ = state_for(m, 2)
    h = make_rng(4).normal(size=6)
    z = compute_logits(h, 2, p, st_, m)
    base = h @ p.w_g + p.b_g
    uni = list(m.universal_ids(2))
    np.testing.assert_allclose(z[uni], base[uni] + 0.5 * (st_.U @ (h @ p.w_k)), atol=1e-12)
    loc = list(m.local_ids(2))
    np.testing.assert_array_equal(z[loc], base[loc])


def test_missing_state_raises():
    m = build_staggered(tiny_topology())
    with pytest.raises(RoutingError, match="missing fast-weight state"):
        compute_logits(np.ones(6), 0, router(m), None, m)


def test_negative_beta_rejected():
    with pytest.raises(RoutingError):
        RouterParams(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 1)), -0.1)


def test_suppression_buries_universal_mass():
    m = build_staggered(tiny_topology(num_universal=6, window=3))
    p = router(m)
    st_ = state_for(m, 0)
    H = make_rng(9).normal(size=(10_000, 6))
    z = compute_logits(H, 0, p, st_, m, [suppression(1e4)], 0.0)
    ids, gates, probs = route(z, 2)
    uni = list(m.universal_ids(0))
    loc = list(m.local_ids(0))
    assert z[:, uni].max() < z[:, loc].min()
    assert probs[:, uni].sum(axis=1).max() < 1e-40
    ue_gates = np.where(ids >= m.universal_offset, gates, 0.0)
    assert ue_gates.max() < 1e-30


# -- selection --------------------------------------------------------------------------------

def test_select_equal_pair():
    sel = select_experts(np.array([1.0, 1.0]), 2)
    assert sel.expert_ids.tolist() == [0, 1]
    np.testing.assert_allclose(sel.gates, [0.5, 0.5], atol=1e-15)


def test_select_renormalises_over_pick():
    sel = select_experts(np.log([6.0, 3.0, 1.0]), 2)
    assert sel.expert_ids.tolist() == [0, 1]
    np.testing.assert_allclose(sel.gates, [2 / 3, 1 / 3], atol=1e-14)


def test_select_full_set_equals_softmax():
    z = np.array([0.3, -1.0, -np.inf, 2.0])
    sel = select_experts(z, 3)
    full = np.exp(z[[3, 0, 1]]) / np.exp(z[[0, 1, 3]]).sum()
    np.testing.assert_allclose(sel.gates, full, atol=1e-14)


def test_select_too_few_reachable():
    with pytest.raises(ValueError):
        select_experts(np.array([1.0, -np.inf, -np.inf]), 2)


def test_masking_soundness_many_calls():
    rng = make_rng(5)
    kinds = ["staggered", "forward_window", "reverse_order", "sandwich", "all_to_all"]
    calls = 0
    for trial in range(20):
        L = int(rng.integers(1, 7))
        n_u = int(rng.integers(1, 9))
        w = int(rng.integers(1, n_u + 1))
        loc = int(rng.integers(0, 3))
        k = int(rng.integers(1, w + loc + 1))
        c = TopologyConfig(L, int(rng.integers(1, L + 1)), n_u, w, int(rng.integers(0, 4)), loc, k)
        m = build_variant(kinds[trial % 5], c)
        p = router(m, d=4, dk=2, seed=trial)
        for layer in range(L):
            st_ = FastWeightState(rng.normal(size=(len(m.windows[layer]), 2)))
            z = compute_logits(rng.normal(size=(500, 4)), layer, p, st_, m, [warmup()], 0.01)
            ids, gates, _ = route(z, k)
            assert m.mask[layer][ids].all()
            assert np.all(gates > 0)
            np.testing.assert_allclose(gates.sum(axis=1), 1.0, atol=1e-10)
            calls += len(ids)
    assert calls > 10_000


# -- fast weights -----------------------------------------------------------------------------

def test_fast_weight_hand_example():
    U = fast_weight_update(np.zeros((2, 1)), np.array([[1.0]]), np.array([[1.0, 0.0]]), 1.0)
    np.testing.assert_allclose(U, [[0.5], [-0.5]], atol=1e-15)


def test_fast_weight_fixed_point_and_zero_eta():
    rng = make_rng(0)
    U, K = rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
    p_hat = softmax_rows(K @ U.T)
    np.testing.assert_allclose(fast_weight_update(U, K, p_hat, 0.7), U, atol=1e-15)
    np.testing.assert_array_equal(fast_weight_update(U, K, rng.dirichlet(np.ones(3), 5), 0.0), U)


def test_fast_weight_dimension_mismatch():
    with pytest.raises(RoutingError, match="dimension mismatch"):
        fast_weight_update(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((4, 2)), 0.1)


def mean_ce(U, K, P):
    logp = np.log(softmax_rows(K @ U.T))
    return -np.mean(np.sum(P * logp, axis=1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(1, 5), st.integers(0, 10_000))
def test_fast_weight_is_gradient_step(n, dk, w, seed):
    rng = np.random.default_rng(seed)
    U, K = rng.normal(size=(w, dk)), rng.normal(size=(n, dk))
    P = rng.dirichlet(np.ones(w), n)
    eta = 0.3
    step = (U - fast_weight_update(U, K, P, eta)) / eta
    eps = 1e-6
    num = np.zeros_like(U)
    for idx in np.ndindex(*U.shape):
        a, b = U.copy(), U.copy()
        a[idx] += eps
        b[idx] -= eps
        num[idx] = (mean_ce(a, K, P) - mean_ce(b, K, P)) / (2 * eps)
    rel = np.abs(step - num) / np.maximum(np.maximum(np.abs(step), np.abs(num)), 1e-6)
    assert rel.max() < 1e-5


def test_universal_targets_soft_and_hard():
    probs = np.array([[0.5, 0.2, 0.3, 0.0], [1.0, 0.0, 0.0, 0.0]])
    ids = np.array([[0, 2], [0, 1]])
    soft, keep = universal_targets(probs, ids, [1, 2])
    assert keep.tolist() == [True, False]
    np.testing.assert_allclose(soft[0], [0.4, 0.6])
    hard, keep = universal_targets(probs, ids, [1, 2], hard=True)
    assert keep.tolist() == [True, True]
    np.testing.assert_allclose(hard, [[0.0, 1.0], [1.0, 0.0]])


# -- schedules --------------------------------------------------------------------------------

def test_schedule_examples():
    assert schedule_value(suppression(1e4), 0.0) == 1e4
    assert schedule_value(warmup(0.75, 0.05), 0.05) == 0.0
    assert schedule_value(warmup(0.75, 0.05), 0.025) == pytest.approx(0.375, abs=1e-15)


def test_suppression_signs_and_anneal():
    s = suppression(1e4, 0.5)
    assert s.signed_at(0.0) == -1e4
    assert s.value_at(0.5) == 0.0 == s.value_at(0.9)
    ts = np.linspace(0, 1, 101)
    vals = [s.value_at(t) for t in ts]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert warmup().signed_at(0.0) == 0.75


def test_unknown_schedule_kind():
    with pytest.raises(RoutingError):
        BiasSchedule("cosine", 1.0, 1.0)


def test_log_rho_semantics():
    # the warmup bias is the log of a pre-softmax mass multiplier >= 1
    assert math.exp(warmup(0.75, 0.05).value_at(0.0)) >= 1.0
    assert math.exp(warmup(0.75, 0.05).value_at(0.5)) == 1.0
