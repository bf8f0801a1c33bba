"""Learnable patch scoring and per-slide quantile split into relevant/remaining patches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .nn import Linear, Module


class PatchSelector(Module):
    """Two-layer MLP scoring each patch in (0, 1): sigmoid(W2 GELU(W1 x + b1) + b2)."""

    def __init__(self, d, rng, hidden=256):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def __call__(self, X):
        return score_patches(X, self)


def score_patches(X, params):
    X = ag.as_tensor(X)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"expected an (N, d) feature matrix with N >= 1, got {X.shape}")
    if X.shape[1] != params.fc1.weight.shape[0]:
        raise ValueError(f"feature dim {X.shape[1]} does not match selector input {params.fc1.weight.shape[0]}")
    return ag.sigmoid(params.fc2(ag.gelu(params.fc1(X))))


def quantile_threshold(logits, q):
    """Linear-interpolation quantile: position q*(N-1) on the sorted scores."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"quantile must lie in [0, 1), got {q}")
    s = np.sort(np.asarray(logits, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("cannot threshold an empty score vector")
    pos = q * (s.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, s.size - 1)
    frac = pos - lo
    return float(s[lo] + frac * (s[hi] - s[lo]))


@dataclass
class SelectionResult:
    sel_idx: np.ndarray
    rem_idx: np.ndarray
    logits: np.ndarray
    tau: float
    fallback: bool = False
    P_sel: object = None
    P_rem: object = None


def split_patches(P, logits, tau, q=0.25):
    """Rows with score > tau form the relevant set; the rest are remaining.

    If nothing clears the threshold (all scores tied), the first
    ceil((1-q)*N) rows are kept and ``fallback`` is set.
    """
    scores = np.asarray(logits.data if isinstance(logits, ag.Tensor) else logits,
                        dtype=np.float64).ravel()
    n = scores.size
    mask = scores > tau
    fallback = False
    if not mask.any():
        mask = np.zeros(n, dtype=bool)
        mask[: max(1, math.ceil((1.0 - q) * n))] = True
        fallback = True
    sel = np.flatnonzero(mask)
    rem = np.flatnonzero(~mask)
    res = SelectionResult(sel, rem, scores, float(tau), fallback)
    if P is not None:
        P = ag.as_tensor(P)
        res.P_sel = ag.take_rows(P, sel)
        res.P_rem = ag.take_rows(P, rem) if rem.size else None
    return res


def select(X, selector, q):
    """Score, weight rows by their scores and split. Returns a SelectionResult."""
    X = ag.as_tensor(X)
    logits = selector(X)
    P = ag.mul(X, logits)
    tau = quantile_threshold(logits.data, q)
    return split_patches(P, logits, tau, q)
