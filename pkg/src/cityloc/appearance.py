"""Appearance summarization: reduce each landmark's descriptor set to its
dominant modes (k-means centroids) or to a representative subset (k-medoids
or random).  The target is either a fixed count or a fraction of the
original count, floored at one descriptor."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .clustering import kmeans, kmedoids

STRATEGIES = ("kmeans", "kmedoids", "random")


def target_count(n: int, fixed_k: Optional[int] = None,
                 ratio: Optional[float] = None) -> int:
    if (fixed_k is None) == (ratio is None):
        raise ValueError("give exactly one of fixed_k or ratio")
    if fixed_k is not None:
        t = fixed_k
    else:
        t = int(np.floor(ratio * n))
    return max(1, min(t, n))


def _circular_mean(angles: np.ndarray) -> float:
    return float(np.arctan2(np.sin(angles).mean(), np.cos(angles).mean()))


def summarize_appearance(descriptors: np.ndarray,
                         strategy: str,
                         seed: int,
                         fixed_k: Optional[int] = None,
                         ratio: Optional[float] = None,
                         orientations: Optional[np.ndarray] = None
                         ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Reduce one landmark's descriptors to its appearance modes.

    Returns (descriptors, orientations); orientations is None when none were
    given.  kmeans emits synthetic centroids (orientation = circular mean of
    the cluster); kmedoids and random emit subsets.  Deterministic for a
    fixed seed.
    """
    x = np.atleast_2d(np.asarray(descriptors))
    n = x.shape[0]
    if n < 1:
        raise ValueError("landmark has no descriptors")
    k = target_count(n, fixed_k, ratio)
    if k >= n:
        return x.copy(), None if orientations is None else np.asarray(orientations).copy()
    rng = np.random.default_rng(seed)
    if strategy == "random":
        pick = np.sort(rng.choice(n, size=k, replace=False))
        out = x[pick]
        ori = None if orientations is None else np.asarray(orientations)[pick]
    elif strategy == "kmedoids":
        medoids, _, _ = kmedoids(x.astype(np.float64), k, rng)
        pick = np.sort(medoids)
        out = x[pick]
        ori = None if orientations is None else np.asarray(orientations)[pick]
    elif strategy == "kmeans":
        centers, assign, _ = kmeans(x.astype(np.float64), k, rng)
        out = centers.astype(x.dtype)
        ori = None
        if orientations is not None:
            ang = np.asarray(orientations)
            ori = np.empty(k, dtype=np.float32)
            for j in range(k):
                members = ang[assign == j]
                ori[j] = _circular_mean(members) if len(members) else 0.0
    else:
        raise ValueError(f"unknown strategy {strategy!r}; pick from {STRATEGIES}")
    return out, ori
