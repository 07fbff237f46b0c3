import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbos.errors import ConfigError, DimensionError
from turbos.moe import (
    DropPolicy,
    ExpertParams,
    MoeConfig,
    MoeParams,
    apply_capacity,
    expert_capacity,
    expert_ffn,
    init_moe_params,
    load_balance_stats,
    moe_dense_reference,
    moe_forward,
    route,
    route_topk,
)

D_MODEL = 16


def small(drop=DropPolicy.NO_DROP, E=6, k=2):
    return MoeConfig(n_experts=E, top_k=k, n_shared=1, capacity_factor=1.5, d_ff=24, drop_policy=drop)


def test_route_tie_break():
    d = route_topk(np.array([[1.0, 1.0, 0.0]]), 2)
    assert d.indices.tolist() == [[0, 1]]
    np.testing.assert_allclose(d.weights, [[0.5, 0.5]])


def test_route_saturation():
    d = route_topk(np.array([[60.0, 0.0, 0.0, 0.0]]), 2)
    assert d.indices[0, 0] == 0 and d.weights[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_route_renormalized_softmax():
    d = route_topk(np.array([[2.0, 1.0, 0.0, 0.0]]), 2)
    assert d.indices.tolist() == [[0, 1]]
    # e/(1+e), renormalizing over the kept pair cancels the dropped mass
    np.testing.assert_allclose(d.weights[0], [0.7310585786300049, 0.2689414213699951], atol=1e-6)


def test_route_uniform_logits_pick_lowest():
    d = route_topk(np.zeros((5, 8)), 2)
    assert (d.indices == [0, 1]).all()
    stats = load_balance_stats(d, 8)
    assert stats.counts.tolist() == [5, 5, 0, 0, 0, 0, 0, 0]
    assert stats.max_mean_ratio == pytest.approx(4.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_route_weights_are_a_distribution(k, seed):
    logits = np.random.default_rng(seed).normal(size=(7, 6)) * 4
    d = route_topk(logits, k)
    np.testing.assert_allclose(d.weights.sum(axis=1), 1.0, atol=1e-12)
    assert all(len(set(row)) == k for row in d.indices.tolist())


def test_capacity_examples():
    assert expert_capacity(64, MoeConfig(n_experts=32, top_k=2, capacity_factor=1.5)) == 6
    assert expert_capacity(1, MoeConfig(n_experts=32, top_k=1, capacity_factor=0.1)) == 1
    with pytest.raises(ConfigError):
        expert_capacity(0, MoeConfig())


@pytest.mark.parametrize("T", [1, 7, 64, 255, 4096])
@pytest.mark.parametrize("E,k", [(4, 1), (8, 2), (32, 2), (32, 8)])
def test_capacity_integer_grid(T, E, k):
    # gamma = 3/2, so ceil(3 T k / 2E) in pure integer arithmetic
    want = max(1, -(-3 * T * k // (2 * E)))
    assert expert_capacity(T, MoeConfig(n_experts=E, top_k=k, capacity_factor=1.5)) == want


def test_no_drop_never_drops():
    d = route_topk(np.zeros((50, 4)), 2)
    assert not apply_capacity(d, small(E=4)).dropped.any()


def test_drop_to_capacity_in_token_order():
    cfg = small(DropPolicy.DROP_TO_CAPACITY, E=4)
    d = apply_capacity(route_topk(np.zeros((8, 4)), 2), cfg)
    cap = expert_capacity(8, cfg)  # ceil(1.5*8*2/4) = 6
    assert cap == 6
    assert not d.dropped[:cap].any() and d.dropped[cap:].all()
    assert load_balance_stats(d, 4).counts.tolist() == [6, 6, 0, 0]


def test_identical_experts_degeneracy(rng):
    cfg = small()
    p = init_moe_params(cfg, D_MODEL, rng)
    one = lambda a: np.repeat(a[:1], cfg.n_experts, axis=0)  # noqa: E731
    p.experts = ExpertParams(one(p.experts.gate), one(p.experts.up), one(p.experts.down))
    x = rng.normal(size=(9, D_MODEL)).astype(np.float32)
    want = expert_ffn(p.shared, 0, x) + expert_ffn(p.experts, 0, x)
    assert np.abs(moe_forward(cfg, p, x) - want).max() <= 1e-6


@pytest.mark.parametrize("drop", list(DropPolicy))
def test_dense_oracle(rng, drop):
    cfg = small(drop)
    p = init_moe_params(cfg, D_MODEL, rng)
    x = rng.normal(size=(8, D_MODEL)).astype(np.float32)
    assert np.abs(moe_forward(cfg, p, x) - moe_dense_reference(cfg, p, x)).max() <= 1e-5


def test_token_permutation_equivariance(rng):
    cfg = small()
    p = init_moe_params(cfg, D_MODEL, rng)
    x = rng.normal(size=(10, D_MODEL)).astype(np.float32)
    perm = rng.permutation(10)
    np.testing.assert_allclose(moe_forward(cfg, p, x)[perm], moe_forward(cfg, p, x[perm]), atol=1e-6)


def test_load_recount(rng):
    E = 8
    d = route_topk(rng.normal(size=(1024, E)), 2)
    stats = load_balance_stats(d, E)
    want = [sum(int(e == j) for row in d.indices.tolist() for e in row) for j in range(E)]
    assert stats.counts.tolist() == want
    assert stats.fraction.sum() == pytest.approx(1.0)


def test_cycling_one_hot_is_balanced():
    E = 4
    logits = np.full((16, E), -10.0)
    logits[np.arange(16), np.arange(16) % E] = 10.0
    stats = load_balance_stats(route_topk(logits, 1), E)
    assert stats.counts.tolist() == [4] * E and stats.max_mean_ratio == 1.0


def test_shape_errors(rng):
    cfg = small()
    p = init_moe_params(cfg, D_MODEL, rng)
    with pytest.raises(DimensionError):
        moe_forward(cfg, p, np.zeros((2, D_MODEL + 1), np.float32))
    with pytest.raises(ConfigError):
        MoeConfig(n_experts=2, top_k=3)
