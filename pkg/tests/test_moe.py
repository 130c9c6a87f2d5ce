"""MoE layer: routing rules, sparsity counters, gate normalization, gradients."""

import numpy as np
import pytest

from vulnlm.autodiff import Tensor, finite_diff_gradient, gelu, gradient_agreement
from vulnlm.moe import MoeConfig, init_moe_params, moe_forward, route

RNG = np.random.default_rng

CFG = MoeConfig(d_model=6, n_experts=8, k_active=2, hidden_mult=4)


def identity_router(d, e):
    """Router whose logits equal the first e input coordinates (d >= e)."""
    w = np.zeros((d, e))
    w[:e, :e] = np.eye(e)
    return Tensor(w)


def test_route_all_equal_ties_to_lowest_indices():
    router = identity_router(8, 8)
    idx, gates = route(np.zeros(8), router)
    assert list(idx) == [0, 1]
    assert np.allclose(gates.data, [0.5, 0.5], atol=1e-12)


def test_route_fixed_logits_gate_values():
    router = identity_router(8, 8)
    token = np.array([2.0, 1.0, 0, 0, 0, 0, 0, 0])
    idx, gates = route(token, router)
    assert list(idx) == [0, 1]
    # softmax over {2, 1}
    assert np.allclose(gates.data, [0.7311, 0.2689], atol=1e-4)
    assert abs(gates.data.sum() - 1.0) < 1e-6


def test_route_descending_order_of_indices():
    router = identity_router(8, 8)
    token = np.zeros(8)
    token[7] = 3.0
    token[3] = 2.0
    idx, _ = route(token, router)
    assert list(idx) == [7, 3]


def test_route_rejects_non_finite():
    with pytest.raises(ValueError):
        route(np.array([np.nan] * 8), identity_router(8, 8))


def test_gates_sum_to_one_random():
    rng = RNG(0)
    router = Tensor(rng.normal(size=(6, 8)))
    for _ in range(20):
        _, gates = route(rng.normal(size=6), router)
        assert abs(gates.data.sum() - 1.0) < 1e-6


def test_forward_identical_experts_collapse_to_dense():
    rng = RNG(1)
    params = init_moe_params(CFG, rng, dtype=np.float64)
    for name in ("experts.w1", "experts.b1", "experts.w2", "experts.b2"):
        params[name].data[:] = params[name].data[0]
    x = rng.normal(size=(5, CFG.d_model))
    out, _ = moe_forward(Tensor(x), CFG, params)
    dense = (
        gelu(Tensor(x) @ Tensor(params["experts.w1"].data[0]) + Tensor(params["experts.b1"].data[0]))
        @ Tensor(params["experts.w2"].data[0])
        + Tensor(params["experts.b2"].data[0])
    )
    assert np.abs(out.data - dense.data).max() < 1e-12


def test_forward_single_token_matches_manual_combination():
    rng = RNG(2)
    params = init_moe_params(CFG, rng, dtype=np.float64)
    x = rng.normal(size=(1, CFG.d_model))
    out, stats = moe_forward(Tensor(x), CFG, params)
    idx, gates = route(x[0], params["router.w"])
    assert list(stats.indices[0]) == list(idx)
    manual = np.zeros(CFG.d_model)
    for j, e in enumerate(idx):
        he = gelu(Tensor(x) @ params["experts.w1"][int(e)] + params["experts.b1"][int(e)])
        oe = he @ params["experts.w2"][int(e)] + params["experts.b2"][int(e)]
        manual = manual + gates.data[j] * oe.data[0]
    assert np.abs(out.data[0] - manual).max() < 1e-12


def test_counters_sum_to_two_per_token():
    rng = RNG(3)
    params = init_moe_params(CFG, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(64, CFG.d_model)))
    _, stats = moe_forward(x, CFG, params)
    assert stats.expert_token_counts.sum() == 128
    # each token touches exactly two distinct experts
    assert stats.indices.shape == (64, 2)
    assert np.all(stats.indices[:, 0] != stats.indices[:, 1])


def test_permutation_equivariance():
    rng = RNG(4)
    params = init_moe_params(CFG, rng, dtype=np.float64)
    x = rng.normal(size=(10, CFG.d_model))
    perm = rng.permutation(10)
    out, _ = moe_forward(Tensor(x), CFG, params)
    out_p, _ = moe_forward(Tensor(x[perm]), CFG, params)
    assert np.abs(out_p.data - out.data[perm]).max() < 1e-12


def test_batched_input_matches_flat():
    rng = RNG(5)
    params = init_moe_params(CFG, rng, dtype=np.float64)
    x = rng.normal(size=(2, 3, CFG.d_model))
    out3, _ = moe_forward(Tensor(x), CFG, params)
    out2, _ = moe_forward(Tensor(x.reshape(6, CFG.d_model)), CFG, params)
    assert np.abs(out3.data.reshape(6, CFG.d_model) - out2.data).max() < 1e-12


def test_aux_loss_uniform_vs_skewed():
    rng = RNG(6)
    params = init_moe_params(CFG, rng, dtype=np.float64)
    x = np.abs(rng.normal(size=(40, CFG.d_model)))  # positive features
    params["router.w"].data[...] = 0.0  # uniform probs -> penalty exactly n_experts * 1/n_experts
    _, stats_u = moe_forward(Tensor(x), CFG, params)
    assert abs(stats_u.aux_loss.item() - 1.0) < 1e-9
    params["router.w"].data[:, 0] = 10.0  # expert 0 dominates every token
    _, stats_s = moe_forward(Tensor(x), CFG, params)
    assert np.all(stats_s.indices[:, 0] == 0)
    assert stats_s.aux_loss.item() > 1.5


def test_forward_validates_input():
    params = init_moe_params(CFG, RNG(7), dtype=np.float64)
    with pytest.raises(ValueError):
        moe_forward(Tensor(np.zeros((0, CFG.d_model))), CFG, params)
    with pytest.raises(ValueError):
        moe_forward(Tensor(np.zeros((4, CFG.d_model + 1))), CFG, params)


def test_gradients_flow_through_gates_and_experts():
    cfg = MoeConfig(d_model=4, n_experts=4, k_active=2, hidden_mult=2)
    params = init_moe_params(cfg, RNG(8), dtype=np.float64)
    rng = RNG(9)
    x0 = rng.normal(size=(5, cfg.d_model))
    w = Tensor(rng.normal(size=(5, cfg.d_model)))

    def loss_wrt_x(t):
        out, _ = moe_forward(t, cfg, params)
        return (out * w).sum()

    xt = Tensor(x0.copy(), requires_grad=True)
    loss_wrt_x(xt).backward()
    rel, tiny = gradient_agreement(xt.grad, finite_diff_gradient(loss_wrt_x, Tensor(x0.copy())))
    assert rel < 1e-4 and tiny < 1e-6

    for pname in ("router.w", "experts.w1", "experts.b2"):
        base = params[pname].data.copy()

        def loss_wrt_param(t, pname=pname):
            params[pname].data = t.data
            try:
                out, _ = moe_forward(Tensor(x0), cfg, params)
                return (out * w).sum()
            finally:
                params[pname].data = base

        params[pname].grad = None
        out, _ = moe_forward(Tensor(x0), cfg, params)
        (out * w).sum().backward()
        rel, tiny = gradient_agreement(params[pname].grad, finite_diff_gradient(loss_wrt_param, Tensor(base.copy())))
        assert rel < 1e-4 and tiny < 1e-6, pname
