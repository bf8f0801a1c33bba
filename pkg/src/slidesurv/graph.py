"""Fused morphological/spatial k-NN graph and graph-guided k-means over selected patches.

Everything here runs on detached numpy arrays: top-k selection and cluster
assignment are discrete, so no gradient flows through this stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Module, parameter

EPS = 1e-6


class SimilarityFusion(Module):
    """Two raw logits whose softmax gives (w_morph, w_spatial); init (0.8, 0.2)."""

    def __init__(self, w_morph=0.8, w_spatial=0.2):
        self.logits = parameter(np.log([w_morph, w_spatial]))

    def weights(self):
        z = self.logits.data - self.logits.data.max()
        e = np.exp(z)
        return e / e.sum()


@dataclass
class KnnGraph:
    neighbors: np.ndarray  # (m, k) int
    weights: np.ndarray  # (m, k) row-stochastic
    k: int
    degenerate: bool = False


@dataclass
class Clustering:
    labels: np.ndarray
    centroids: np.ndarray
    n_clusters: int
    sse: float
    sse_history: list = field(default_factory=list)
    n_iter: int = 0
    reseeds: int = 0

    @property
    def order(self):
        """Patch indices sorted by cluster label (stable), so clusters are contiguous."""
        return np.argsort(self.labels, kind="stable")

    def groups(self):
        return [np.flatnonzero(self.labels == c) for c in range(self.n_clusters)]


def _zscore(a):
    return (a - a.mean(axis=0)) / (a.std(axis=0) + EPS)


def normalize_inputs(P_sel, coords):
    """Column z-score then row L2 normalization of features; column z-score of coordinates."""
    X = _zscore(np.asarray(P_sel, dtype=np.float64))
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    return X, _zscore(np.asarray(coords, dtype=np.float64))


def pairwise_distances(A, B):
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(sq, 0.0))


def fused_similarity(X_norm, coords_norm, fusion):
    w = fusion.weights() if isinstance(fusion, SimilarityFusion) else np.asarray(fusion)
    s_morph = X_norm @ X_norm.T
    D = pairwise_distances(coords_norm, coords_norm)
    np.fill_diagonal(D, 0.0)
    s_spatial = np.exp(-D / (D.std() + EPS))
    S = w[0] * s_morph + w[1] * s_spatial
    return 0.5 * (S + S.T)


def build_knn_graph(S, k):
    """Top-k neighbours per row (self excluded, ties to the lower index).

    Edge weights are the similarities clipped at zero and divided by their
    row sum; a row whose clipped similarities are all zero gets uniform weights.
    """
    S = np.asarray(S, dtype=np.float64)
    m = S.shape[0]
    if m < 2:
        return KnnGraph(np.zeros((m, 0), dtype=np.intp), np.zeros((m, 0)), 0, degenerate=True)
    k = int(min(max(k, 1), m - 1))
    masked = S.copy()
    np.fill_diagonal(masked, -np.inf)
    # stable sort on the negated row keeps the lower index first on ties
    nbrs = np.argsort(-masked, axis=1, kind="stable")[:, :k]
    vals = np.maximum(np.take_along_axis(S, nbrs, axis=1), 0.0)
    tot = vals.sum(axis=1, keepdims=True)
    weights = np.where(tot > EPS, vals / np.maximum(tot, EPS), 1.0 / k)
    return KnnGraph(nbrs, weights, k)


def smooth_features(graph, X_norm):
    """One aggregation step of the row-stochastic neighbour operator."""
    if graph.k == 0:
        return X_norm.copy()
    return np.einsum("mk,mkd->md", graph.weights, X_norm[graph.neighbors])


def _kmeans_pp(X, C, rng):
    m = X.shape[0]
    chosen = [int(rng.integers(m))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, C):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(m), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return X[chosen].copy()


def _sq_dists(X, centroids):
    return ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def kmeans(X, n_clusters, seed=0, max_iter=100):
    """k-means++ seeding and Lloyd iterations until the assignment is a fixpoint.

    Empty clusters take the point farthest from its current centroid. The SSE
    after every iteration is kept in ``sse_history`` and must not increase.
    """
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    C = int(n_clusters)
    if C < 1 or C > m:
        raise ValueError(f"need 1 <= n_clusters <= n_points, got {C} for {m} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(X, C, rng)
    labels = None
    history = []
    reseeds = 0
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, centroids)
        new = d2.argmin(axis=1)
        counts = np.bincount(new, minlength=C)
        for c in np.flatnonzero(counts == 0):
            own = d2[np.arange(m), new]
            donors = counts[new] > 1
            far = int(np.argmax(np.where(donors, own, -1.0)))
            counts[new[far]] -= 1
            new[far] = c
            counts[c] = 1
            reseeds += 1
        for c in range(C):
            centroids[c] = X[new == c].mean(axis=0)
        sse = float(((X - centroids[new]) ** 2).sum())
        history.append(sse)
        converged = labels is not None and np.array_equal(new, labels)
        labels = new
        if converged:
            break
    return Clustering(labels, centroids, C, history[-1], history, it, reseeds)


def n_clusters_for(m, n_clusters=None, cluster_size=64):
    if n_clusters is not None:
        return int(min(n_clusters, m))
    return int(min(m, max(1, math.ceil(m / cluster_size))))


def graph_guided_kmeans(graph, X_norm, n_clusters=None, cluster_size=64, seed=0, max_iter=100):
    """k-means on graph-smoothed features; C explicit or ceil(m / cluster_size)."""
    m = X_norm.shape[0]
    if n_clusters is not None and n_clusters > m:
        raise ValueError(f"requested {n_clusters} clusters for {m} patches")
    C = n_clusters_for(m, n_clusters, cluster_size)
    return kmeans(smooth_features(graph, X_norm), C, seed=seed, max_iter=max_iter)


def cluster_patches(P_sel, coords, fusion, k=10, n_clusters=None, cluster_size=64, seed=0):
    """Full stage: normalize, fuse similarities, build the k-NN graph, cluster."""
    X_norm, c_norm = normalize_inputs(P_sel, coords)
    graph = build_knn_graph(fused_similarity(X_norm, c_norm, fusion), k)
    return graph_guided_kmeans(graph, X_norm, n_clusters, cluster_size, seed)
