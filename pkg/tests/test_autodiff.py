"""Autodiff core: op semantics, gradient oracle agreement, graph bookkeeping."""

import numpy as np
import pytest

from vulnlm import autodiff as ad
from vulnlm.autodiff import (
    Tensor,
    concat,
    dropout,
    elu_plus_one,
    finite_diff_gradient,
    gelu,
    gradient_agreement,
    layer_norm,
    log_softmax,
    no_grad,
    scatter_rows,
    selective_scan,
    sigmoid,
    silu,
    softmax_rows,
    softplus,
    swap_last,
    take,
)

RNG = np.random.default_rng


def check_grad(f, x, eps=1e-5, tol=1e-4):
    """Compare reverse-mode gradient of scalar f(x) against central differences."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(xt)
    out.backward()
    analytic = xt.grad
    numeric = finite_diff_gradient(f, Tensor(np.array(x, dtype=np.float64)), eps=eps)
    rel, tiny = gradient_agreement(analytic, numeric)
    assert rel < tol, f"relative error {rel}"
    assert tiny < 1e-6, f"tiny-coordinate error {tiny}"


# --------------------------------------------------------------- fixed values


def test_softmax_fixed_row():
    # softmax([1,2,3]) computed once in 64-bit: e^x / sum
    out = softmax_rows(Tensor(np.array([1.0, 2.0, 3.0])))
    expected = np.array([0.09003057317038046, 0.24472847105479767, 0.6652409557748219])
    assert np.allclose(out.data, expected, atol=1e-12)
    direct = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    assert np.allclose(out.data, direct, atol=1e-15)


def test_softmax_extreme_logits_stable():
    out = softmax_rows(Tensor(np.array([1e9, 0.0])))
    assert np.all(np.isfinite(out.data))
    assert abs(out.data[0] - 1.0) < 1e-12 and out.data[1] < 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_rows(Tensor(np.array([np.inf, 0.0])))
    with pytest.raises(ValueError):
        softmax_rows(Tensor(np.array([np.nan, 0.0])))


def test_softmax_rows_sum_to_one():
    rng = RNG(0)
    x = Tensor(rng.normal(size=(5, 7)) * 10)
    out = softmax_rows(x)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out.data >= 0)


def test_elu_plus_one_values():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    out = elu_plus_one(x)
    # exp(-1), 0+1, 2+1
    assert np.allclose(out.data, [0.36787944117144233, 1.0, 3.0], atol=1e-12)


def test_elu_plus_one_strictly_positive_everywhere():
    x = Tensor(np.array([-1e6, -745.0, -100.0, -1e-9, 0.0, 1e6]))
    out = elu_plus_one(x)
    assert np.all(out.data > 0)


def test_softplus_matches_reference():
    x = np.array([-50.0, -1.0, 0.0, 1.0, 50.0])
    out = softplus(Tensor(x))
    assert np.allclose(out.data, np.logaddexp(0.0, x), atol=1e-12)
    assert np.all(out.data > 0)


# ----------------------------------------------------------------- gradients


def test_grad_arith_chain():
    check_grad(lambda t: ((t * 3.0 + 1.0) * t - t / 2.0).sum(), RNG(1).normal(size=(4, 3)))


def test_grad_power_sqrt_log_exp():
    x = np.abs(RNG(2).normal(size=(3, 3))) + 0.5
    check_grad(lambda t: (t**3).sum(), x)
    check_grad(lambda t: t.sqrt().sum(), x)
    check_grad(lambda t: t.log().sum(), x)
    check_grad(lambda t: t.exp().sum(), RNG(3).normal(size=(3, 3)))


def test_grad_matmul_batched():
    rng = RNG(4)
    b = Tensor(rng.normal(size=(5, 4)))

    def f(t):
        return (t @ b).sum()

    check_grad(f, rng.normal(size=(2, 3, 5)))


def test_grad_matmul_right_operand():
    rng = RNG(5)
    a = Tensor(rng.normal(size=(2, 4, 3)))
    check_grad(lambda t: (a @ t).sum(), rng.normal(size=(3, 6)))


def test_grad_broadcast_add_mul():
    rng = RNG(6)
    wide = Tensor(rng.normal(size=(4, 5)))
    check_grad(lambda t: ((wide + t) * t).sum(), rng.normal(size=(5,)))


def test_grad_reductions_and_reshape():
    rng = RNG(7)
    check_grad(lambda t: (t.sum(axis=0) ** 2).sum(), rng.normal(size=(3, 4)))
    check_grad(lambda t: (t.mean(axis=-1, keepdims=True) * t).sum(), rng.normal(size=(3, 4)))
    check_grad(lambda t: (t.reshape(6, 2) ** 2).sum(), rng.normal(size=(3, 4)))


def test_grad_activations():
    rng = RNG(8)
    x = rng.normal(size=(4, 4)) * 2
    for fn in (sigmoid, ad.tanh, silu, gelu, softplus, elu_plus_one):
        check_grad(lambda t, fn=fn: (fn(t) * rng_weights).sum(), x)


rng_weights = Tensor(RNG(9).normal(size=(4, 4)))


def test_grad_softmax_and_log_softmax():
    rng = RNG(10)
    w = Tensor(rng.normal(size=(3, 5)))
    check_grad(lambda t: (softmax_rows(t) * w).sum(), rng.normal(size=(3, 5)))
    check_grad(lambda t: (log_softmax(t) * w).sum(), rng.normal(size=(3, 5)))


def test_grad_take_and_scatter():
    rng = RNG(11)
    idx = np.array([0, 2, 2, 1])

    def f_take(t):
        return (take(t, idx) ** 2).sum()

    check_grad(f_take, rng.normal(size=(3, 4)))

    rows = np.array([1, 0, 1])

    def f_scatter(t):
        return (scatter_rows(t, rows, 4) ** 2).sum()

    check_grad(f_scatter, rng.normal(size=(3, 2)))


def test_grad_concat_and_slice():
    rng = RNG(12)

    def f(t):
        parts = concat([t[0:2], t[2:5] * 2.0], axis=0)
        return (parts**2).sum()

    check_grad(f, rng.normal(size=(5, 3)))


def test_grad_layer_norm():
    rng = RNG(13)
    g = Tensor(rng.normal(size=(6,)), requires_grad=True)
    b = Tensor(rng.normal(size=(6,)), requires_grad=True)
    check_grad(lambda t: (layer_norm(t, g, b) ** 2).sum(), rng.normal(size=(4, 6)))


def test_layer_norm_output_stats():
    rng = RNG(14)
    x = Tensor(rng.normal(size=(8, 16)) * 5 + 3)
    ones = Tensor(np.ones(16))
    zeros = Tensor(np.zeros(16))
    out = layer_norm(x, ones, zeros)
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(out.data.std(axis=-1), 1.0, atol=1e-3)


def test_grad_transpose():
    rng = RNG(15)
    w = Tensor(rng.normal(size=(4, 3)))
    check_grad(lambda t: (swap_last(t) * w).sum(), rng.normal(size=(3, 4)))


# --------------------------------------------------------- graph bookkeeping


def test_every_reachable_parameter_gets_matching_grad():
    rng = RNG(16)
    params = {
        "w1": Tensor(rng.normal(size=(4, 5)), requires_grad=True),
        "b1": Tensor(rng.normal(size=(5,)), requires_grad=True),
        "w2": Tensor(rng.normal(size=(5, 2)), requires_grad=True),
    }
    x = Tensor(rng.normal(size=(3, 4)))
    h = ad.tanh(x @ params["w1"] + params["b1"])
    loss = ((h @ params["w2"]) ** 2).sum()
    loss.backward()
    for name, p in params.items():
        assert p.grad is not None, name
        assert p.grad.shape == p.data.shape, name


def test_grad_accumulates_across_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    y.backward()
    assert np.allclose(x.grad, [7.0])


def test_no_grad_suppresses_graph():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert y._backward is None


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_dropout_semantics():
    rng = RNG(17)
    x = Tensor(np.ones((1000,)), requires_grad=True)
    out = dropout(x, 0.25, rng)
    kept = out.data != 0
    # inverted scaling keeps the expectation
    assert abs(out.data.mean() - 1.0) < 0.1
    assert np.allclose(out.data[kept], 1.0 / 0.75)
    assert dropout(x, 0.0, rng) is x


# ------------------------------------------------------------ selective scan


def scan_loop_oracle(u, delta, A, B, C):
    """Per-step 64-bit reference recurrence."""
    bsz, T, ch = u.shape
    n = A.shape[1]
    h = np.zeros((bsz, ch, n), dtype=np.float64)
    y = np.zeros((bsz, T, ch), dtype=np.float64)
    for t in range(T):
        a = np.exp(delta[:, t, :, None] * A[None])
        b = delta[:, t, :, None] * B[:, t, None, :]
        h = a * h + b * u[:, t, :, None]
        y[:, t] = (h * C[:, t, None, :]).sum(-1)
    return y


def test_scan_two_step_scalar_case():
    # A=-1, delta=ln2 gives decay exp(-ln2)=0.5; B=C=1, u=[1,0]
    ln2 = np.log(2.0)
    u = np.array([[[1.0], [0.0]]])
    delta = np.full((1, 2, 1), ln2)
    A = np.array([[-1.0]])
    B = np.ones((1, 2, 1))
    C = np.ones((1, 2, 1))
    y = selective_scan(Tensor(u), Tensor(delta), Tensor(A), Tensor(B), Tensor(C))
    assert abs(y.data[0, 0, 0] - ln2) < 1e-12          # h1 = delta*B*u = ln2
    assert abs(y.data[0, 1, 0] - 0.5 * ln2) < 1e-12    # h2 = 0.5*h1


def test_scan_matches_loop_oracle():
    rng = RNG(18)
    bsz, T, ch, n = 2, 9, 3, 4
    u = rng.normal(size=(bsz, T, ch))
    delta = np.abs(rng.normal(size=(bsz, T, ch))) + 0.05
    A = -np.abs(rng.normal(size=(ch, n))) - 0.1
    B = rng.normal(size=(bsz, T, n))
    C = rng.normal(size=(bsz, T, n))
    y = selective_scan(Tensor(u), Tensor(delta), Tensor(A), Tensor(B), Tensor(C))
    assert np.abs(y.data - scan_loop_oracle(u, delta, A, B, C)).max() < 1e-6


def test_scan_rejects_bad_inputs():
    u = np.zeros((1, 4, 2))
    delta = np.full((1, 4, 2), 0.1)
    A = -np.ones((2, 3))
    B = np.ones((1, 4, 3))
    C = np.ones((1, 4, 3))
    with pytest.raises(ValueError):
        selective_scan(Tensor(u), Tensor(-delta), Tensor(A), Tensor(B), Tensor(C))
    with pytest.raises(ValueError):
        selective_scan(Tensor(u), Tensor(delta), Tensor(A), Tensor(np.ones((1, 4, 2))), Tensor(C))
    with pytest.raises(ValueError):
        selective_scan(Tensor(u[:, :3]), Tensor(delta), Tensor(A), Tensor(B), Tensor(C))


def test_scan_gradients_all_inputs():
    rng = RNG(19)
    bsz, T, ch, n = 1, 5, 2, 3
    u0 = rng.normal(size=(bsz, T, ch))
    delta0 = np.abs(rng.normal(size=(bsz, T, ch))) + 0.1
    A0 = -np.abs(rng.normal(size=(ch, n))) - 0.1
    B0 = rng.normal(size=(bsz, T, n))
    C0 = rng.normal(size=(bsz, T, n))
    w = Tensor(rng.normal(size=(bsz, T, ch)))

    pool = {"u": u0, "delta": delta0, "A": A0, "B": B0, "C": C0}
    for target in pool:
        def f(t, target=target):
            args = {k: Tensor(v) for k, v in pool.items()}
            args[target] = t
            return (selective_scan(args["u"], args["delta"], args["A"], args["B"], args["C"]) * w).sum()

        check_grad(f, pool[target])


def test_finite_diff_reports_non_finite_probe():
    def f(t):
        return t.log().sum()

    with np.errstate(divide="ignore"):
        with pytest.raises(ValueError, match="coordinate"):
            finite_diff_gradient(f, Tensor(np.array([1.0, 0.0])), eps=1e-5)
