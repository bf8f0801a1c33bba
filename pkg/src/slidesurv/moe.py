"""Two-expert Gaussian mixture density head over softplus-transformed survival time.

Time t > 0 maps to y = log(expm1(t)); each expert places a K-component
Gaussian mixture on y. Mixture means/scales come from cohort-level anchors
shared by both experts, mixture weights and the expert gate from the slide
embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autograd as ag
from .autograd import INV_SQRT_2PI, LOG_2PI, stable_inverse_softplus
from .nn import Linear, Module, glorot, parameter

LOG_FLOOR = 1e-8


def time_jacobian(t):
    """|dy/dt| = e^t / (e^t - 1), evaluated as 1 / (1 - e^-t)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("time must be positive")
    out = -1.0 / np.expm1(-t)
    return float(out) if out.ndim == 0 else out


def log_time_jacobian(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("time must be positive")
    out = -np.log(-np.expm1(-t))
    return float(out) if out.ndim == 0 else out


@dataclass
class ExpertOutputs:
    """Differentiable per-slide head outputs. Shapes: gate (1, E), rest (E, K)."""

    gate: ag.Tensor
    log_gate: ag.Tensor
    log_lam: ag.Tensor
    mu: ag.Tensor
    sigma: ag.Tensor

    def prediction(self):
        return SurvivalPrediction(self.gate.data.ravel().copy(), np.exp(self.log_lam.data),
                                  self.mu.data.copy(), self.sigma.data.copy())


class MixtureDensityExperts(Module):
    def __init__(self, d, rng, n_components=100, n_experts=2, encoder_hidden=128, d_embed=128):
        K, E = n_components, n_experts
        self.K, self.E = K, E
        self.enc1 = Linear(d, encoder_hidden, rng)
        self.enc2 = Linear(encoder_hidden, d_embed, rng)
        self.gate = Linear(d_embed, E, rng)
        self.lam_w = parameter(np.stack([glorot(rng, d_embed, K) for _ in range(E)]))
        self.lam_b = parameter(np.zeros((E, 1, K)))
        self.p_mu = parameter(np.linspace(-2.0, 2.0, K).reshape(K, 1))
        self.p_sigma = parameter(np.full((K, 1), stable_inverse_softplus(4.0 / K)))
        self.w_mu = parameter(np.stack([np.eye(K)] * E))
        self.w_sigma = parameter(np.stack([np.eye(K)] * E))

    def init_anchors(self, times):
        """Spread the mean anchors over the transformed range of (scaled) training times."""
        times = np.asarray(times, dtype=np.float64)
        lo, hi = stable_inverse_softplus(times.min()), stable_inverse_softplus(times.max())
        if hi - lo < 1e-6:
            lo, hi = lo - 1.0, hi + 1.0
        self.p_mu.data = np.linspace(lo, hi, self.K).reshape(self.K, 1)
        self.p_sigma.data = np.full((self.K, 1), stable_inverse_softplus((hi - lo) / self.K))

    def encode(self, z):
        return self.enc2(ag.gelu(self.enc1(z)))

    def components(self):
        """Per-expert means and scales, each (E, K)."""
        mu = ag.reshape(ag.matmul(self.w_mu, self.p_mu), (self.E, self.K))
        sigma = ag.softplus(ag.reshape(ag.matmul(self.w_sigma, self.p_sigma), (self.E, self.K)))
        return mu, sigma

    def __call__(self, z):
        h = self.encode(z)
        logits = self.gate(h)
        lam_logits = ag.reshape(ag.add(ag.matmul(h, self.lam_w), self.lam_b), (self.E, self.K))
        mu, sigma = self.components()
        return ExpertOutputs(ag.softmax(logits, -1), ag.log_softmax(logits, -1),
                             ag.log_softmax(lam_logits, -1), mu, sigma)


def expert_gmm(outputs, e):
    """(lambda, mu, sigma) of expert ``e`` (0-based) as numpy arrays."""
    return (np.exp(outputs.log_lam.data[e]), outputs.mu.data[e].copy(), outputs.sigma.data[e].copy())


@dataclass
class SurvivalPrediction:
    """Evaluated head for one slide. gate (E,), lam/mu/sigma (E, K)."""

    gate: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def _z(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        y = stable_inverse_softplus(t)
        return t, (np.atleast_1d(y)[:, None, None] - self.mu) / self.sigma

    def expert_tpdf(self, t):
        """(n, E) per-expert densities over t."""
        t, z = self._z(t)
        dens = (self.lam * INV_SQRT_2PI * np.exp(-0.5 * z * z) / self.sigma).sum(-1)
        return time_jacobian(t).reshape(-1, 1) * dens

    def expert_cdp(self, t):
        _, z = self._z(t)
        # clipped so that rounding in the weights never pushes 1 - CDP outside [0, 1]
        return np.clip((self.lam * ndtr(z)).sum(-1), 0.0, 1.0)

    def expert_spf(self, t):
        return 1.0 - self.expert_cdp(t)

    def tpdf(self, t, expert=None):
        v = self.expert_tpdf(t)
        return v[:, expert] if expert is not None else v @ self.gate

    def cdp(self, t, expert=None):
        v = self.expert_cdp(t)
        return v[:, expert] if expert is not None else np.clip(v @ self.gate, 0.0, 1.0)

    def spf(self, t, expert=None):
        return 1.0 - self.cdp(t, expert)


def gate_and_mix(pred, t):
    """Gate-weighted (TPDF, SPF) at times t."""
    return pred.tpdf(t), pred.spf(t)


def _log_normal_pdf(y, mu, sigma):
    z = ag.div(ag.sub(y, mu), sigma)
    return ag.sub(ag.mul(ag.square(z), -0.5), ag.add(ag.log(sigma), 0.5 * LOG_2PI))


def log_tpdf(outputs, t):
    """Differentiable log TPDF(t | z), mixed over experts, via log-sum-exp."""
    y = stable_inverse_softplus(t)
    joint = ag.add(ag.add(ag.transpose(outputs.log_gate), outputs.log_lam),
                   _log_normal_pdf(y, outputs.mu, outputs.sigma))
    return ag.add(ag.logsumexp(joint), log_time_jacobian(t))


def survival_prob(outputs, t):
    """Differentiable SPF(t | z) = sum_e G_e sum_i lam_ei Phi((mu_ei - y) / sigma_ei)."""
    y = stable_inverse_softplus(t)
    upper = ag.normal_cdf(ag.div(ag.sub(outputs.mu, y), outputs.sigma))
    per_expert = ag.tsum(ag.mul(ag.exp(outputs.log_lam), upper), axis=1, keepdims=True)
    return ag.tsum(ag.mul(ag.transpose(outputs.gate), per_expert))


class FloorCounter:
    """Counts loss evaluations where the log floor was active."""

    def __init__(self):
        self.count = 0


def nll_loss(outputs, t, event, floor=LOG_FLOOR, counter=None):
    """-c log TPDF(t) - (1 - c) log SPF(t), each log floored at log(floor)."""
    if t <= 0:
        raise ValueError("observed time must be positive")
    if event:
        val = log_tpdf(outputs, t)
        floored = val.data < np.log(floor)
        logv = ag.clamp_min(val, np.log(floor))
    else:
        val = survival_prob(outputs, t)
        floored = val.data < floor
        logv = ag.log(ag.clamp_min(val, floor))
    if floored and counter is not None:
        counter.count += 1
    return ag.mul(logv, -1.0)


def diversity_loss(outputs):
    """Squared distance between the two experts' mean vectors."""
    diff = ag.sub(ag.take_rows(outputs.mu, [0]), ag.take_rows(outputs.mu, [1]))
    return ag.tsum(ag.square(diff))


def entropy_loss(gate, eps=LOG_FLOOR):
    gate = ag.as_tensor(gate)
    return ag.mul(ag.tsum(ag.mul(gate, ag.log(ag.add(gate, eps)))), -1.0)


def total_loss(outputs, t, event, lambda_div=0.01, lambda_ent=0.01, counter=None):
    loss = nll_loss(outputs, t, event, counter=counter)
    if lambda_div and outputs.mu.shape[0] > 1:
        loss = ag.add(loss, ag.mul(diversity_loss(outputs), lambda_div))
    if lambda_ent:
        loss = ag.add(loss, ag.mul(entropy_loss(outputs.gate), lambda_ent))
    return loss
