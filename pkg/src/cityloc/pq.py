"""Product quantization of projected descriptors.

A descriptor is split into M subvectors (after a variance-balancing
permutation of its dimensions); each subvector is quantized against its own
k-word codebook.  The squared distance between a raw descriptor d and a code
q is the sum over subspaces of ||d_j - c_j(i_j)||^2, computed exactly via a
per-query lookup table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import kmeans

DEFAULT_SUBSPACES = 2
DEFAULT_WORDS = 256


@dataclass
class PqCodebook:
    centroids: np.ndarray  # (M, k, D/M) float32
    permutation: np.ndarray  # (D,) int: permuted = descriptor[permutation]

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        d = self.centroids.shape[0] * self.centroids.shape[2]
        if sorted(self.permutation.tolist()) != list(range(d)):
            raise ValueError("permutation must be a bijection on descriptor dims")

    @property
    def num_subspaces(self) -> int:
        return self.centroids.shape[0]

    @property
    def num_words(self) -> int:
        return self.centroids.shape[1]

    @property
    def subdim(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.num_subspaces * self.subdim

    @property
    def code_dtype(self):
        return np.uint8 if self.num_words <= 256 else np.uint16


def balance_permutation(descriptors: np.ndarray, m: int) -> np.ndarray:
    """Assign dimensions to subspaces so per-subspace variance is even.

    Greedy: walk dimensions in descending variance, always appending to the
    subspace with the smallest running total (capacity D/m each).
    """
    x = np.asarray(descriptors, dtype=np.float64)
    d = x.shape[1]
    if d % m != 0:
        raise ValueError(f"dimension {d} not divisible by {m} subspaces")
    cap = d // m
    var = x.var(axis=0)
    groups = [[] for _ in range(m)]
    totals = np.zeros(m)
    for dim in np.argsort(-var, kind="stable"):
        open_groups = [j for j in range(m) if len(groups[j]) < cap]
        j = min(open_groups, key=lambda g: (totals[g], g))
        groups[j].append(int(dim))
        totals[j] += var[dim]
    return np.array([dim for g in groups for dim in g], dtype=np.int64)


def train_pq(descriptors: np.ndarray, m: int = DEFAULT_SUBSPACES,
             k: int = DEFAULT_WORDS, seed: int = 0, balance: bool = True,
             restarts: int = None, iters: int = None) -> PqCodebook:
    """Learn per-subspace vocabularies by k-means on training descriptors."""
    from .clustering import KMEANS_ITERS, KMEANS_RESTARTS

    restarts = KMEANS_RESTARTS if restarts is None else restarts
    iters = KMEANS_ITERS if iters is None else iters
    x = np.asarray(descriptors, dtype=np.float64)
    d = x.shape[1]
    if d % m != 0:
        raise ValueError(f"dimension {d} not divisible by {m} subspaces")
    perm = balance_permutation(x, m) if balance else np.arange(d, dtype=np.int64)
    xp = x[:, perm]
    sub = d // m
    rng = np.random.default_rng(seed)
    cents = np.empty((m, k, sub), dtype=np.float32)
    for j in range(m):
        block = xp[:, j * sub:(j + 1) * sub]
        centers, _, _ = kmeans(block, k, rng, restarts=restarts, iters=iters)
        # Canonical word order keeps training deterministic under restarts.
        order = np.lexsort(centers.T[::-1])
        cents[j] = centers[order]
    return PqCodebook(cents, perm)


def pq_encode(cb: PqCodebook, descriptors: np.ndarray) -> np.ndarray:
    """Quantize descriptors -> (n, M) codes (nearest word per subspace)."""
    x = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if x.shape[1] != cb.dim:
        raise ValueError(f"descriptor dim {x.shape[1]} != codebook dim {cb.dim}")
    xp = x[:, cb.permutation]
    sub = cb.subdim
    codes = np.empty((x.shape[0], cb.num_subspaces), dtype=cb.code_dtype)
    for j in range(cb.num_subspaces):
        block = xp[:, j * sub:(j + 1) * sub]
        c = cb.centroids[j].astype(np.float64)
        d2 = (np.sum(block * block, axis=1)[:, None] - 2.0 * block @ c.T
              + np.sum(c * c, axis=1)[None, :])
        codes[:, j] = np.argmin(d2, axis=1)
    return codes


def pq_decode(cb: PqCodebook, codes: np.ndarray) -> np.ndarray:
    """Reconstruct descriptors (in the original dimension order)."""
    codes = np.atleast_2d(np.asarray(codes))
    parts = [cb.centroids[j][codes[:, j]] for j in range(cb.num_subspaces)]
    permuted = np.concatenate(parts, axis=1).astype(np.float64)
    out = np.empty_like(permuted)
    out[:, cb.permutation] = permuted
    return out


def pq_distance_table(cb: PqCodebook, descriptor: np.ndarray) -> np.ndarray:
    """(M, k) table of squared subvector distances for one query."""
    d = np.asarray(descriptor, dtype=np.float64)
    if d.shape != (cb.dim,):
        raise ValueError(f"descriptor dim {d.shape} != codebook dim {cb.dim}")
    dp = d[cb.permutation]
    sub = cb.subdim
    lut = np.empty((cb.num_subspaces, cb.num_words), dtype=np.float64)
    for j in range(cb.num_subspaces):
        diff = cb.centroids[j].astype(np.float64) - dp[j * sub:(j + 1) * sub]
        lut[j] = np.sum(diff * diff, axis=1)
    return lut


def pq_distance(cb: PqCodebook, descriptor: np.ndarray,
                codes: np.ndarray) -> np.ndarray:
    """Exact squared distance between a raw descriptor and PQ codes.

    ``codes`` may be one (M,) code or a batch (n, M); returns a scalar or
    an (n,) vector accordingly.
    """
    lut = pq_distance_table(cb, descriptor)
    c = np.asarray(codes)
    single = c.ndim == 1
    c = np.atleast_2d(c)
    out = np.zeros(c.shape[0], dtype=np.float64)
    for j in range(cb.num_subspaces):
        out += lut[j][c[:, j]]
    return float(out[0]) if single else out


def subspace_variances(cb: PqCodebook, descriptors: np.ndarray) -> np.ndarray:
    """Total training variance landing in each subspace after permutation."""
    x = np.asarray(descriptors, dtype=np.float64)[:, cb.permutation]
    var = x.var(axis=0)
    sub = cb.subdim
    return np.array([var[j * sub:(j + 1) * sub].sum()
                     for j in range(cb.num_subspaces)])
