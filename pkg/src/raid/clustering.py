"""Euclidean k-means (Lloyd's algorithm with k-means++ seeding).

Deterministic given (points, k, seed); empty clusters are repaired by
reseeding to the point farthest from its assigned centroid so the result
always has exactly k centroids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray       # (k, D)
    assignments: np.ndarray     # (n,) int64
    inertia: float
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (n, k), clipped at 0."""
    p2 = np.einsum("ij,ij->i", points, points)[:, None]
    c2 = np.einsum("ij,ij->i", centroids, centroids)[None, :]
    d2 = p2 - 2.0 * points @ centroids.T + c2
    return np.maximum(d2, 0.0)


def assign(points, centroids) -> np.ndarray:
    """Index of the nearest centroid per point (Euclidean, ties to lower index)."""
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or centroids.shape[0] == 0:
        raise ValueError("centroids must be a non-empty (k, D) array")
    if points.ndim != 2 or points.shape[1] != centroids.shape[1]:
        raise ValueError("points and centroids must share dimensionality")
    return _squared_distances(points, centroids).argmin(axis=1).astype(np.int64)


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = _squared_distances(points, centroids[:1]).ravel()
    for i in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, _squared_distances(points, centroids[i : i + 1]).ravel())
    return centroids


def kmeans_fit(points, k: int, seed: int, max_iter: int = 100, tol: float = 1e-4) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the largest centroid shift drops below tol or after max_iter
    iterations.  Empty clusters are reseeded to the point currently farthest
    from its assigned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, D) array")
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds number of points n={n}")
    if not np.isfinite(points).all():
        raise ValueError("points must be finite")

    rng = np.random.default_rng(seed)
    centroids = _plus_plus_init(points, k, rng)
    history: list[float] = []
    iterations = 0

    for _ in range(max_iter):
        iterations += 1
        d2 = _squared_distances(points, centroids)
        labels = d2.argmin(axis=1)
        nearest = d2[np.arange(n), labels]
        history.append(float(nearest.sum()))

        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        counts = np.bincount(labels, minlength=k).astype(np.float64)

        new_centroids = centroids.copy()
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        # Empty-cluster repair: move each empty centroid onto the point
        # farthest from its current centroid (distinct points per repair).
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            order = np.argsort(-nearest, kind="stable")
            taken = 0
            for j in empty:
                new_centroids[j] = points[order[taken]]
                taken += 1

        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    d2 = _squared_distances(points, centroids)
    labels = d2.argmin(axis=1).astype(np.int64)
    inertia = float(d2[np.arange(n), labels].sum())
    return KMeansResult(
        centroids=centroids,
        assignments=labels,
        inertia=inertia,
        iterations_run=iterations,
        inertia_history=history,
    )
