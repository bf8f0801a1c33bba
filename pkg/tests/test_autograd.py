import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slidesurv import autograd as ag
from slidesurv.nn import Adam, Linear, LayerNorm, parameter

from _gradcheck import numeric_grad, rel_err


def test_backward_of_sum_is_ones():
    p = parameter([1.0, -2.0, 3.0])
    (g,) = ag.grad(ag.tsum(p), [p])
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])


def test_backward_of_sum_of_squares():
    p = parameter([1.0, 2.0])
    (g,) = ag.grad(ag.tsum(ag.mul(p, p)), [p])
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_untouched_param_gets_zero_grad():
    p, q = parameter([1.0, 2.0]), parameter(np.ones((2, 2)))
    gp, gq = ag.grad(ag.tsum(ag.exp(p)), [p, q])
    np.testing.assert_allclose(gp, np.exp([1.0, 2.0]))
    assert gq.shape == (2, 2) and not gq.any()


def test_backward_rejects_non_scalar():
    p = parameter([1.0, 2.0])
    with pytest.raises(ValueError):
        ag.backward(ag.mul(p, 2.0))


def test_cycle_is_detected():
    p = parameter([1.0])
    a = ag.mul(p, 2.0)
    b = ag.mul(a, 3.0)
    a._parents = (b,)  # corrupt the tape on purpose
    with pytest.raises(RuntimeError, match="cycle"):
        ag.backward(ag.tsum(b))


def test_shared_subexpression_accumulates():
    p = parameter([3.0])
    a = ag.mul(p, p)
    loss = ag.tsum(ag.add(a, ag.mul(a, 2.0)))
    (g,) = ag.grad(loss, [p])
    np.testing.assert_allclose(g, [18.0])


def test_non_finite_values_raise():
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        ag.log(ag.Tensor([0.0]))


COMPOSITES = {
    "matmul_gelu": lambda x, w: ag.tsum(ag.gelu(ag.matmul(x, w))),
    "sigmoid_tanh": lambda x, w: ag.tsum(ag.mul(ag.sigmoid(ag.matmul(x, w)), ag.tanh(ag.matmul(x, w)))),
    "softmax_rows": lambda x, w: ag.tsum(ag.mul(ag.softmax(ag.matmul(x, w), -1), ag.Tensor(np.arange(12.0).reshape(3, 4)))),
    "log_softmax": lambda x, w: ag.tsum(ag.mul(ag.log_softmax(ag.matmul(x, w), -1), ag.Tensor(np.linspace(-1, 1, 12).reshape(3, 4)))),
    "softplus_logsumexp": lambda x, w: ag.logsumexp(ag.softplus(ag.matmul(x, w))),
    "normal_cdf": lambda x, w: ag.tsum(ag.normal_cdf(ag.matmul(x, w))),
    "div_square": lambda x, w: ag.tsum(ag.div(ag.square(ag.matmul(x, w)), ag.add(ag.exp(ag.matmul(x, w)), 1.0))),
    "batched": lambda x, w: ag.tsum(ag.matmul(ag.transpose(ag.reshape(ag.matmul(x, w), (3, 2, 2)), (1, 0, 2)),
                                              ag.transpose(ag.reshape(ag.matmul(x, w), (3, 2, 2)), (1, 2, 0)))),
    "take_concat_mean": lambda x, w: ag.tsum(ag.square(ag.concat([ag.take_rows(ag.matmul(x, w), [2, 0, 2]),
                                                                  ag.mean(ag.matmul(x, w), 0, True)]))),
}


@pytest.mark.parametrize("name", sorted(COMPOSITES))
def test_composite_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    x = parameter(rng.normal(size=(3, 5)))
    w = parameter(rng.normal(size=(5, 4)) * 0.5)
    f = COMPOSITES[name]
    analytic = ag.grad(f(x, w), [x, w])
    for p, g in zip([x, w], analytic):
        num = numeric_grad(lambda: f(x, w).item(), p)
        for i, v in num.items():
            assert rel_err(g.reshape(-1)[i], v) < 1e-4, (name, i)


def test_layer_norm_gradients_and_moments():
    rng = np.random.default_rng(3)
    x = parameter(rng.normal(2.0, 3.0, size=(4, 6)))
    ln = LayerNorm(6)
    ln.gamma.data = rng.normal(size=6)
    ln.beta.data = rng.normal(size=6)
    weights = ag.Tensor(rng.normal(size=(4, 6)))
    f = lambda: ag.tsum(ag.mul(ln(x), weights))
    params = [x, ln.gamma, ln.beta]
    analytic = ag.grad(f(), params)
    for p, g in zip(params, analytic):
        for i, v in numeric_grad(lambda: f().item(), p).items():
            assert rel_err(g.reshape(-1)[i], v) < 1e-4

    plain = ag.layer_norm(ag.Tensor(x.data), ag.Tensor(np.ones(6)), ag.Tensor(np.zeros(6)), eps=0.0)
    assert np.abs(plain.data.mean(axis=1)).max() < 1e-6
    assert np.abs(plain.data.var(axis=1) - 1.0).max() < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50))
def test_softmax_rows_are_probability_vectors(n, k, shift):
    x = np.random.default_rng(n * 7 + k).normal(size=(n, k)) * 10 + shift
    s = ag.softmax(ag.Tensor(x), -1).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_scalar_identities():
    assert ag.gelu(ag.Tensor(0.0)).item() == 0.0
    assert ag.sigmoid(ag.Tensor(0.0)).item() == 0.5
    ys = ag.softplus(ag.Tensor(np.linspace(-30, 30, 201))).data
    assert (np.diff(ys) > 0).all()


def test_normal_cdf_values():
    assert ag.normal_cdf_value(0.0) == 0.5
    assert ag.normal_cdf_value(-40.0) < 1e-300
    assert ag.normal_cdf_value(40.0) == 1.0
    # mpmath ncdf(1.96) at 40 digits
    assert abs(ag.normal_cdf_value(1.96) - 0.9750021048517796) < 1e-12
    assert round(float(ag.normal_cdf_value(1.96)), 7) == 0.9750021


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30))
def test_normal_cdf_symmetry(x):
    assert abs(ag.normal_cdf_value(x) + ag.normal_cdf_value(-x) - 1.0) <= 1e-12


def test_normal_cdf_monotone():
    v = ag.normal_cdf_value(np.linspace(-10, 10, 2001))
    assert (np.diff(v) >= 0).all()


def test_inverse_softplus():
    assert ag.stable_inverse_softplus(math.log(2.0)) == pytest.approx(0.0, abs=1e-15)
    assert abs(ag.stable_inverse_softplus(50.0) - 50.0) < 1e-20
    v = ag.stable_inverse_softplus(0.1)
    # mpmath log(expm1(0.1))
    assert v == pytest.approx(-2.252168461044091, rel=1e-13)
    assert abs(ag.softplus_value(v) - 0.1) / 0.1 < 1e-10
    with pytest.raises(ValueError):
        ag.stable_inverse_softplus(0.0)
    with pytest.raises(ValueError):
        ag.stable_inverse_softplus(-1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 700))
def test_inverse_softplus_round_trip(t):
    y = ag.stable_inverse_softplus(t)
    assert abs(ag.softplus_value(y) - t) <= 1e-10 * t


def test_log_sum_exp():
    assert ag.log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-15)
    assert ag.log_sum_exp([3.25]) == 3.25
    assert ag.log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)
    v = np.array([0.3, -1.2, 2.5])
    assert ag.log_sum_exp(v) == pytest.approx(ag.log_sum_exp(v - v.max()) + v.max(), abs=1e-14)
    with pytest.raises(ValueError):
        ag.log_sum_exp([])


def test_dropout_is_identity_in_eval_and_inverted_in_training():
    x = ag.Tensor(np.ones((200, 50)))
    rng = np.random.default_rng(0)
    assert ag.dropout(x, 0.1, rng, training=False) is x
    y = ag.dropout(parameter(np.ones((200, 50))), 0.1, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.9}
    assert abs(y.mean() - 1.0) < 0.02


def test_adam_minimises_quadratic():
    rng = np.random.default_rng(0)
    lin = Linear(3, 1, rng)
    target = np.array([[1.0], [-2.0], [0.5]])
    X = rng.normal(size=(64, 3))
    y = X @ target
    opt = Adam(lin.parameters(), lr=0.05)
    for _ in range(400):
        opt.zero_grad()
        err = ag.sub(lin(ag.Tensor(X)), ag.Tensor(y))
        ag.backward(ag.mean(ag.square(err)))
        opt.step()
    np.testing.assert_allclose(lin.weight.data, target, atol=1e-2)
