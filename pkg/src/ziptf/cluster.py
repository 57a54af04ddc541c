"""Clustering helpers for consensus aggregation: K-means on factor columns,
silhouette scoring, and Local Outlier Factor filtering."""

from __future__ import annotations

import numpy as np
from sklearn.cluster import KMeans

from .errors import DegenerateClusteringError

_DIST_FLOOR = 1e-12


def kmeans_points(points, n_clusters: int, seed: int = 0) -> np.ndarray:
    """K-means++ with 10 restarts, keeping the lowest-inertia labeling."""
    points = np.asarray(points, dtype=np.float64)
    if n_clusters > points.shape[0]:
        raise DegenerateClusteringError(
            f"{n_clusters} clusters requested for {points.shape[0]} points"
        )
    distinct = np.unique(points, axis=0).shape[0]
    if distinct < n_clusters:
        raise DegenerateClusteringError(
            f"only {distinct} distinct points for {n_clusters} clusters"
        )
    km = KMeans(n_clusters=n_clusters, init="k-means++", n_init=10,
                random_state=seed)
    return km.fit_predict(points)


def _pairwise_distances(points) -> np.ndarray:
    sq = np.sum(points**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def silhouette_score(points, labels) -> float:
    """Mean over points of (b - a) / max(a, b); singletons contribute 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise ValueError("silhouette requires at least two clusters")
    dist = _pairwise_distances(points)
    n = points.shape[0]
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own == 1:
            continue  # singleton: score 0
        a = dist[i, own].sum() / (n_own - 1)
        b = min(
            dist[i, labels == c].mean() for c in clusters if c != labels[i]
        )
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def lof_scores(points, n_neighbors: int) -> np.ndarray:
    """Local Outlier Factor with reachability distances over k nearest
    neighbors; distances are floored at 1e-12 so duplicates score 1."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 0 < n_neighbors < n:
        raise ValueError(f"n_neighbors must be in (0, {n})")
    dist = _pairwise_distances(points)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1)
    knn = order[:, :n_neighbors]
    k_dist = dist[np.arange(n), knn[:, -1]]

    reach = np.maximum(dist[np.arange(n)[:, None], knn], k_dist[knn])
    lrd = 1.0 / np.maximum(reach.mean(axis=1), _DIST_FLOOR)
    return lrd[knn].mean(axis=1) / lrd
