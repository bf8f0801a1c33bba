"""Intra-/inter-cluster multi-head self-attention and attention pooling to a slide vector."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .nn import LayerNorm, Module, glorot, parameter


class MultiHeadSelfAttention(Module):
    """Residual MHSA block: LayerNorm(x + Dropout(MHSA(x))).

    Per-head projections are stored side by side as (d, d) matrices, so head j
    uses columns j*d/h:(j+1)*d/h. No biases in the projections.
    """

    def __init__(self, d, rng, heads=8, dropout=0.1):
        if d % heads:
            raise ValueError(f"feature dim {d} is not divisible by {heads} heads")
        self.d, self.heads, self.p = d, heads, dropout
        self.w_q = parameter(glorot(rng, d, d))
        self.w_k = parameter(glorot(rng, d, d))
        self.w_v = parameter(glorot(rng, d, d))
        self.w_o = parameter(glorot(rng, d, d))
        self.norm = LayerNorm(d)
        self.last_attention = None

    def _split(self, x):
        n = x.shape[0]
        return ag.transpose(ag.reshape(x, (n, self.heads, self.d // self.heads)), (1, 0, 2))

    def attend(self, x):
        """Raw MHSA(x) without residual or normalization."""
        n = x.shape[0]
        q = self._split(ag.matmul(x, self.w_q))
        k = self._split(ag.matmul(x, self.w_k))
        v = self._split(ag.matmul(x, self.w_v))
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d / self.heads))
        attn = ag.softmax(scores, axis=-1)
        self.last_attention = attn.data
        heads = ag.reshape(ag.transpose(ag.matmul(attn, v), (1, 0, 2)), (n, self.d))
        return ag.matmul(heads, self.w_o)

    def __call__(self, x, rng=None):
        x = ag.as_tensor(x)
        branch = ag.dropout(self.attend(x), self.p, rng, self.training and rng is not None)
        return self.norm(ag.add(x, branch))


class AttentionPool(Module):
    """Weights softmax_i(W_a tanh(W_h p_i)) and returns sum_i alpha_i p_i."""

    def __init__(self, d, rng, hidden=128):
        self.w_h = parameter(glorot(rng, d, hidden))
        self.w_a = parameter(glorot(rng, hidden, 1))
        self.last_weights = None

    def __call__(self, P):
        return gated_attention_pool(P, self)


def gated_attention_pool(P, pool):
    P = ag.as_tensor(P)
    if P.shape[0] < 1:
        raise ValueError("cannot pool an empty bag")
    scores = ag.matmul(ag.tanh(ag.matmul(P, pool.w_h)), pool.w_a)  # (N, 1)
    alpha = ag.softmax(ag.transpose(scores), axis=-1)  # (1, N)
    pool.last_weights = alpha.data.ravel()
    return ag.matmul(alpha, P)  # (1, d)


def intra_cluster_attention(clusters, block, rng=None):
    return [block(c, rng) for c in clusters]


def cluster_representatives(clusters):
    """(C, d) matrix of per-cluster row means."""
    return ag.concat([ag.mean(c, axis=0, keepdims=True) for c in clusters], axis=0)


def inter_cluster_attention(R, block, rng=None):
    return block(R, rng)


def integrate_features(refined, R_prime, P_rem=None):
    """Concatenate refined clusters, add the mean representative to every row,
    then append the remaining (unselected) rows."""
    P_tilde = ag.concat(refined, axis=0) if len(refined) > 1 else refined[0]
    P_hat = ag.add(P_tilde, ag.mean(R_prime, axis=0, keepdims=True))
    if P_rem is None or P_rem.shape[0] == 0:
        return P_hat
    return ag.concat([P_hat, P_rem], axis=0)


class ClusterAttention(Module):
    """Intra-cluster block (shared across clusters) plus a separate inter-cluster block."""

    def __init__(self, d, rng, heads=8, dropout=0.1):
        self.intra = MultiHeadSelfAttention(d, rng, heads, dropout)
        self.inter = MultiHeadSelfAttention(d, rng, heads, dropout)

    def __call__(self, clusters, P_rem=None, rng=None):
        refined = intra_cluster_attention(clusters, self.intra, rng)
        R_prime = inter_cluster_attention(cluster_representatives(refined), self.inter, rng)
        return integrate_features(refined, R_prime, P_rem)
