"""Density clustering shared by log-event grouping and case-embedding grouping.

Deterministic DBSCAN: points are visited in input order, cluster ids are
assigned in discovery order, and a border point reachable from several
clusters keeps the first (lowest) cluster id that claims it.  Noise points
carry the sentinel id -1.
"""

from __future__ import annotations

from collections import deque

import numpy as np


def pairwise_distances(x: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Full distance matrix for a small point set.

    "cosine" assumes nothing about normalization; zero vectors are treated
    as maximally distant from everything but themselves.
    """
    if metric == "euclidean":
        sq = np.sum(x * x, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
        np.maximum(d2, 0.0, out=d2)
        np.fill_diagonal(d2, 0.0)
        return np.sqrt(d2)
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        safe = np.where(norms == 0.0, 1.0, norms)
        unit = x / safe[:, None]
        sim = np.clip(unit @ unit.T, -1.0, 1.0)
        dist = 1.0 - sim
        zero = norms == 0.0
        if zero.any():
            dist[zero, :] = 1.0
            dist[:, zero] = 1.0
            dist[np.ix_(zero, zero)] = 0.0
        np.fill_diagonal(dist, 0.0)
        return dist
    raise ValueError(f"unknown metric: {metric}")


def dbscan(
    x: np.ndarray,
    eps: float,
    min_pts: int,
    metric: str = "euclidean",
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Cluster ids per point (-1 for noise).

    `weights` gives each point a multiplicity: a point is core when the total
    weight inside its eps-ball (itself included) reaches min_pts.  With unit
    weights this is textbook DBSCAN.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    n = x.shape[0]
    labels = np.full(n, -1, dtype=int)
    if n == 0:
        return labels
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    dist = pairwise_distances(x, metric)
    neighbor_mask = dist <= eps
    mass = neighbor_mask @ w
    is_core = mass >= min_pts

    visited = np.zeros(n, dtype=bool)
    next_id = 0
    for i in range(n):
        if visited[i] or not is_core[i]:
            continue
        # grow a new cluster from this unclaimed core point
        cluster = next_id
        next_id += 1
        queue = deque([i])
        visited[i] = True
        labels[i] = cluster
        while queue:
            p = queue.popleft()
            if not is_core[p]:
                continue
            for q in np.nonzero(neighbor_mask[p])[0]:
                if labels[q] == -1:
                    labels[q] = cluster
                if not visited[q]:
                    visited[q] = True
                    queue.append(q)
    return labels
