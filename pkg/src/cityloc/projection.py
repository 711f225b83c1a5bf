"""PCA descriptor projection (default 40 -> 16 dimensions)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_PROJECTED_DIM = 16


@dataclass
class PcaProjection:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (d, D), rows orthonormal, top-variance first

    @property
    def input_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return project(self, x)


def train_pca(descriptors: np.ndarray, d: int = DEFAULT_PROJECTED_DIM) -> PcaProjection:
    """Fit the top-d principal directions of the training descriptors.

    Raises ValueError when fewer than d samples are given or the data does
    not span d directions (rank-deficient input).
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("descriptors must be a 2D array")
    n, D = x.shape
    if d > D:
        raise ValueError(f"cannot project {D}-dim descriptors to {d} dims")
    if n < d:
        raise ValueError(f"need at least {d} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    # SVD of the centered data; rows of vt are principal directions.
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s[d - 1] <= 1e-12 * max(s[0], 1.0):
        raise ValueError("rank-deficient input: data spans fewer than d directions")
    basis = vt[:d]
    # Deterministic sign: largest-magnitude entry of each row positive.
    for i in range(d):
        j = int(np.argmax(np.abs(basis[i])))
        if basis[i, j] < 0:
            basis[i] = -basis[i]
    return PcaProjection(mean, basis)


def project(p: PcaProjection, descriptor: np.ndarray) -> np.ndarray:
    """Project one descriptor or a batch onto the learned basis."""
    x = np.asarray(descriptor, dtype=np.float64)
    return (x - p.mean) @ p.basis.T


def reconstruct(p: PcaProjection, projected: np.ndarray) -> np.ndarray:
    y = np.asarray(projected, dtype=np.float64)
    return y @ p.basis + p.mean
