"""Seeded k-means / k-medoids used by codebook training and appearance
summarization.  Deliberately small and deterministic: k-means++ seeding,
a fixed iteration cap and restart count, everything driven by one RNG."""

from __future__ import annotations

import numpy as np

KMEANS_RESTARTS = 10
KMEANS_ITERS = 50


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    idx = int(rng.integers(n))
    centers[0] = x[idx]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points identical to a chosen center
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def assign_labels(x: np.ndarray, centers: np.ndarray, chunk: int = 8192):
    """Nearest-center assignment, chunked to bound the distance matrix.

    Returns (labels (n,), squared distance to the assigned center (n,)).
    """
    c2 = np.sum(centers * centers, axis=1)
    labels = np.empty(len(x), dtype=np.int64)
    mind = np.empty(len(x))
    for s in range(0, len(x), chunk):
        blk = x[s:s + chunk]
        d2 = (np.sum(blk * blk, axis=1)[:, None] - 2.0 * blk @ centers.T
              + c2[None, :])
        idx = np.argmin(d2, axis=1)
        labels[s:s + chunk] = idx
        mind[s:s + chunk] = d2[np.arange(len(blk)), idx]
    return labels, np.maximum(mind, 0.0)


def _lloyd(x: np.ndarray, centers: np.ndarray, iters: int):
    k = centers.shape[0]
    assign = None
    for _ in range(iters):
        new_assign, _ = assign_labels(x, centers)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    assign, mind = assign_labels(x, centers)
    return centers, assign, float(mind.sum())


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
           restarts: int = KMEANS_RESTARTS, iters: int = KMEANS_ITERS):
    """Best-of-restarts Lloyd's. Returns (centers (k,D), assignment (n,), cost)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k >= n:
        # every point its own center, padded by repeats
        centers = x[np.arange(k) % n].copy()
        return centers, np.arange(n), 0.0
    best = None
    for _ in range(restarts):
        centers = _kmeans_pp_init(x, k, rng)
        centers, assign, cost = _lloyd(x, centers.copy(), iters)
        if best is None or cost < best[2]:
            best = (centers, assign, cost)
    return best


def kmedoids(x: np.ndarray, k: int, rng: np.random.Generator,
             iters: int = KMEANS_ITERS):
    """Alternating k-medoids on squared Euclidean distance.

    Returns (medoid_indices (k,), assignment (n,), cost).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k >= n:
        return np.arange(n), np.arange(n), 0.0
    d2 = (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ x.T
          + np.sum(x * x, axis=1)[None, :])
    np.fill_diagonal(d2, 0.0)
    medoids = rng.choice(n, size=k, replace=False)
    for _ in range(iters):
        assign = np.argmin(d2[:, medoids], axis=1)
        new_medoids = medoids.copy()
        for j in range(k):
            members = np.flatnonzero(assign == j)
            if len(members) == 0:
                continue
            sub = d2[np.ix_(members, members)]
            new_medoids[j] = members[int(np.argmin(sub.sum(axis=1)))]
        if np.array_equal(np.sort(new_medoids), np.sort(medoids)):
            break
        medoids = new_medoids
    assign = np.argmin(d2[:, medoids], axis=1)
    cost = float(d2[np.arange(n), medoids[assign]].sum())
    order = np.argsort(medoids)
    return medoids[order], order.argsort()[assign], cost
