import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from slidesurv import autograd as ag
from slidesurv.autograd import stable_inverse_softplus
from slidesurv.moe import (ExpertOutputs, FloorCounter, MixtureDensityExperts, SurvivalPrediction, diversity_loss,
                           entropy_loss, expert_gmm, gate_and_mix, log_tpdf, nll_loss, survival_prob,
                           time_jacobian, total_loss)

from _gradcheck import numeric_grad, rel_err

LN2 = math.log(2.0)


def outputs(gate, lam, mu, sigma):
    gate = np.asarray(gate, float).reshape(1, -1)
    lam = np.asarray(lam, float)
    return ExpertOutputs(ag.Tensor(gate), ag.Tensor(np.log(gate)), ag.Tensor(np.log(lam)),
                         ag.Tensor(np.asarray(mu, float)), ag.Tensor(np.asarray(sigma, float)))


def single(mu=0.0, sigma=1.0):
    return outputs([0.5, 0.5], [[1.0], [1.0]], [[mu], [mu]], [[sigma], [sigma]])


def random_prediction(rng, K=5):
    lam = rng.dirichlet(np.ones(K), size=2)
    g = rng.dirichlet(np.ones(2))
    return SurvivalPrediction(g, lam, rng.normal(0, 2, size=(2, K)), rng.uniform(0.2, 2.0, size=(2, K)))


def test_time_jacobian():
    assert time_jacobian(LN2) == pytest.approx(2.0, rel=1e-15)
    assert time_jacobian(50.0) == pytest.approx(1.0, abs=1e-15)
    # mpmath 1 / (1 - exp(-0.01))
    assert time_jacobian(0.01) == pytest.approx(100.50083333194445, rel=1e-14)
    assert (np.asarray(time_jacobian(np.array([0.1, 1.0, 10.0]))) > 1).all()
    with pytest.raises(ValueError):
        time_jacobian(0.0)


def test_expert_gmm_identity_transform_and_uniform_weights():
    rng = np.random.default_rng(0)
    head = MixtureDensityExperts(8, rng, n_components=6, encoder_hidden=16, d_embed=16)
    head.lam_w.data[:] = 0.0
    out = head(ag.Tensor(rng.normal(size=(1, 8))))
    for e in (0, 1):
        lam, mu, sigma = expert_gmm(out, e)
        np.testing.assert_allclose(mu, head.p_mu.data.ravel())
        np.testing.assert_allclose(lam, 1 / 6)
        assert (sigma > 0).all()
    np.testing.assert_allclose(out.gate.data.sum(), 1.0, atol=1e-6)


def test_expert_gmm_matches_formula():
    rng = np.random.default_rng(1)
    K = 4
    head = MixtureDensityExperts(8, rng, n_components=K, encoder_hidden=16, d_embed=16)
    for p in head.parameters():
        p.data = rng.normal(size=p.shape) * 0.5
    z = rng.normal(size=(1, 8))
    out = head(ag.Tensor(z))
    h1 = z @ head.enc1.weight.data + head.enc1.bias.data
    h = (h1 * norm.cdf(h1)) @ head.enc2.weight.data + head.enc2.bias.data
    gl = h @ head.gate.weight.data + head.gate.bias.data
    np.testing.assert_allclose(out.gate.data, np.exp(gl) / np.exp(gl).sum(), atol=1e-6)
    for e in range(2):
        ll = (h @ head.lam_w.data[e] + head.lam_b.data[e]).ravel()
        lam, mu, sigma = expert_gmm(out, e)
        np.testing.assert_allclose(lam, np.exp(ll) / np.exp(ll).sum(), atol=1e-6)
        np.testing.assert_allclose(mu, head.w_mu.data[e] @ head.p_mu.data.ravel(), atol=1e-6)
        np.testing.assert_allclose(sigma, np.log1p(np.exp(head.w_sigma.data[e] @ head.p_sigma.data.ravel())),
                                   atol=1e-6)


def test_tpdf_closed_form():
    pred = single().prediction()
    assert pred.tpdf(LN2)[0] == pytest.approx(0.7978845608028654, rel=1e-12)
    assert pred.tpdf(LN2, expert=0)[0] == pytest.approx(0.7978845608028654, rel=1e-12)


def test_concentrated_weights_reduce_to_single_gaussian():
    lam = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    pred = SurvivalPrediction(np.array([0.3, 0.7]), lam, np.array([[0.5, 3, -2]] * 2), np.array([[0.8, 1, 1]] * 2))
    t = np.array([0.2, 1.0, 3.0])
    y = stable_inverse_softplus(t)
    np.testing.assert_allclose(pred.tpdf(t), time_jacobian(t) * norm.pdf(y, 0.5, 0.8), rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_tpdf_integrates_to_one(seed):
    pred = random_prediction(np.random.default_rng(seed))
    total = quad(lambda t: pred.tpdf(t)[0], 0, np.inf, limit=500, epsabs=1e-10)[0]
    assert abs(total - 1.0) < 1e-3


def test_cdp_examples():
    pred = single().prediction()
    assert pred.cdp(LN2)[0] == pytest.approx(0.5, abs=1e-15)
    assert pred.spf(LN2)[0] == pytest.approx(0.5, abs=1e-15)
    assert pred.cdp(1e-12)[0] < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_cdp_derivative_is_tpdf(seed):
    pred = random_prediction(np.random.default_rng(seed))
    t = np.linspace(0.05, 8, 60)
    h = 1e-6 * t
    num = (pred.cdp(t + h) - pred.cdp(t - h)) / (2 * h)
    dens = pred.tpdf(t)
    mask = dens > 1e-8
    assert (np.abs(num - dens)[mask] / dens[mask]).max() < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_spf_monotone_and_complementary(seed):
    pred = random_prediction(np.random.default_rng(seed))
    t = np.linspace(0.01, 30, 100)
    spf, cdp = pred.spf(t), pred.cdp(t)
    assert (np.diff(spf) <= 0).all()
    assert ((spf >= 0) & (spf <= 1)).all()
    np.testing.assert_array_equal(spf, 1.0 - cdp)
    top = float(np.max(pred.mu + 10 * pred.sigma))
    assert abs(pred.cdp(np.logaddexp(0, top))[0] - 1.0) < 1e-6


def test_gate_mixing():
    same = SurvivalPrediction(np.array([0.9, 0.1]), np.array([[1.0], [1.0]]), np.array([[0.2], [0.2]]),
                              np.array([[1.1], [1.1]]))
    t = np.array([0.5, 2.0])
    np.testing.assert_allclose(same.spf(t), same.spf(t, expert=0), atol=1e-15)
    other = SurvivalPrediction(np.array([0.2, 0.8]), same.lam, same.mu, same.sigma)
    np.testing.assert_allclose(other.tpdf(t), same.tpdf(t), rtol=1e-14)

    sat = SurvivalPrediction(np.array([1.0, 0.0]), np.array([[1.0], [1.0]]), np.array([[0.0], [3.0]]),
                             np.array([[1.0], [0.5]]))
    tp, sp = gate_and_mix(sat, t)
    np.testing.assert_allclose(tp, sat.tpdf(t, 0))
    np.testing.assert_allclose(sp, sat.spf(t, 0))

    y = stable_inverse_softplus(1.5)
    mu = np.array([[y - norm.ppf(0.2)], [y - norm.ppf(0.6)]])
    half = SurvivalPrediction(np.array([0.5, 0.5]), np.array([[1.0], [1.0]]), mu, np.ones((2, 1)))
    np.testing.assert_allclose(half.expert_cdp(1.5)[0], [0.2, 0.6], atol=1e-12)
    assert half.cdp(1.5)[0] == pytest.approx(0.4, abs=1e-12)


def test_differentiable_paths_match_numpy_evaluation():
    rng = np.random.default_rng(3)
    pred = random_prediction(rng)
    out = outputs(pred.gate, pred.lam, pred.mu, pred.sigma)
    for t in (0.1, 1.0, 4.0):
        assert math.exp(log_tpdf(out, t).item()) == pytest.approx(pred.tpdf(t)[0], rel=1e-12)
        assert survival_prob(out, t).item() == pytest.approx(pred.spf(t)[0], rel=1e-10)


def test_nll_examples():
    sure = outputs([0.5, 0.5], [[1.0], [1.0]], [[60.0], [60.0]], [[1.0], [1.0]])
    assert nll_loss(sure, 1.0, 0).item() == pytest.approx(0.0, abs=1e-12)
    sigma = time_jacobian(1.0) / math.sqrt(2 * math.pi)
    peak = outputs([0.5, 0.5], [[1.0], [1.0]], [[stable_inverse_softplus(1.0)]] * 2, [[sigma]] * 2)
    assert nll_loss(peak, 1.0, 1).item() == pytest.approx(0.0, abs=1e-12)
    assert nll_loss(single(), LN2, 1).item() == pytest.approx(0.2257913526447274, rel=1e-12)


def test_nll_floor_is_counted():
    far = outputs([0.5, 0.5], [[1.0], [1.0]], [[-40.0], [-40.0]], [[0.1], [0.1]])
    counter = FloorCounter()
    event = nll_loss(far, 5.0, 1, counter=counter).item()
    censored = nll_loss(far, 5.0, 0, counter=counter).item()
    assert event == pytest.approx(-math.log(1e-8))
    assert censored == pytest.approx(-math.log(1e-8))
    assert counter.count == 2


def test_regularisers():
    out = single()
    assert diversity_loss(out).item() == 0.0
    diff = outputs([0.5, 0.5], [[0.5, 0.5]] * 2, [[0.0, 1.0], [2.0, -1.0]], [[1.0, 1.0]] * 2)
    assert diversity_loss(diff).item() == pytest.approx(8.0)
    assert entropy_loss(ag.Tensor([[0.5, 0.5]])).item() == pytest.approx(math.log(2), abs=1e-7)
    assert abs(entropy_loss(ag.Tensor([[1.0, 0.0]])).item()) < 1e-7
    base = nll_loss(diff, 1.3, 1).item()
    tot = total_loss(diff, 1.3, 1, 0.1, 0.2).item()
    assert tot == pytest.approx(base + 0.1 * 8.0 + 0.2 * entropy_loss(diff.gate).item(), rel=1e-12)


def test_anchor_initialisation_spans_training_times():
    head = MixtureDensityExperts(8, np.random.default_rng(0), n_components=10, encoder_hidden=8, d_embed=8)
    times = np.array([0.2, 1.0, 3.5])
    head.init_anchors(times)
    lo, hi = stable_inverse_softplus(0.2), stable_inverse_softplus(3.5)
    np.testing.assert_allclose(head.p_mu.data.ravel()[[0, -1]], [lo, hi])
    _, sigma = head.components()
    np.testing.assert_allclose(sigma.data, (hi - lo) / 10, rtol=1e-10)


@pytest.mark.parametrize("event", [0, 1])
def test_head_gradients_match_finite_differences(event):
    rng = np.random.default_rng(11)
    head = MixtureDensityExperts(8, rng, n_components=3, encoder_hidden=16, d_embed=16)
    head.init_anchors(np.array([0.3, 4.0]))
    head.w_mu.data += rng.normal(0, 0.1, size=head.w_mu.shape)
    z = ag.Tensor(rng.normal(size=(1, 8)))
    f = lambda: total_loss(head(z), 1.2, event, 0.05, 0.05)
    params = head.parameters()
    analytic = ag.grad(f(), params)
    for p, g in zip(params, analytic):
        idx = rng.choice(p.data.size, size=min(8, p.data.size), replace=False)
        for i, v in numeric_grad(lambda: f().item(), p, idx=idx).items():
            assert rel_err(g.reshape(-1)[i], v) < 1e-4
