"""Random-grids matcher: repeated random rotation + shift hashing.

Each of the N independent grids applies an orthonormal rotation and a
uniform shift to the augmented descriptor space and buckets vectors by the
integer cell of width ``cell_width`` they land in.  A query collides with a
database descriptor whenever they share a cell in at least one grid; per
colliding cell at most ``max_per_cell`` candidates are drawn (seeded), and
exact augmented distances rank the union.
"""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from .matching import AugmentedDescriptor, DescriptorTable, NnMatch, QueryStats, rank_rows

DEFAULT_NUM_GRIDS = 8
DEFAULT_MAX_PER_CELL = 100


def default_cell_width(tau: float, dim: int) -> float:
    """Tie the cell size to the matching distance scale: w = 2*tau/sqrt(D)."""
    return 2.0 * tau / np.sqrt(dim)


class RandomGridsIndex:
    def __init__(self, table: DescriptorTable, cell_width: float,
                 num_grids: int = DEFAULT_NUM_GRIDS, seed: int = 0):
        if cell_width <= 0:
            raise ValueError("cell width must be positive")
        self.table = table
        self.cell_width = cell_width
        self.num_grids = num_grids
        self.seed = seed
        rng = np.random.default_rng(seed)
        dim = table.hash_vectors.shape[1]
        self.rotations = []
        self.shifts = []
        self.buckets: List[Dict[bytes, np.ndarray]] = []
        for _ in range(num_grids):
            a = rng.normal(size=(dim, dim))
            qm, r = np.linalg.qr(a)
            # fix signs for a uniformly-distributed rotation
            qm = qm * np.sign(np.diag(r))
            shift = rng.uniform(0.0, cell_width, size=dim)
            self.rotations.append(qm)
            self.shifts.append(shift)
            keys = self._keys(table.hash_vectors, qm, shift)
            grouped: Dict[bytes, np.ndarray] = {}
            if len(keys):
                order = np.lexsort(keys.T[::-1])
                sorted_keys = keys[order]
                change = np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)
                starts = np.concatenate([[0], np.flatnonzero(change) + 1])
                ends = np.append(starts[1:], len(order))
                for s, e in zip(starts, ends):
                    grouped[sorted_keys[s].tobytes()] = order[s:e].astype(np.int64)
            self.buckets.append(grouped)

    def _keys(self, x: np.ndarray, rot: np.ndarray, shift: np.ndarray) -> np.ndarray:
        if x.shape[0] == 0:
            return np.zeros((0, x.shape[1]), dtype=np.int32)
        return np.floor((x @ rot.T + shift) / self.cell_width).astype(np.int32)

    def query(self, q: AugmentedDescriptor, k: int, keypoint_id: int = 0,
              max_per_cell: int = DEFAULT_MAX_PER_CELL,
              sample_seed: int = 0,
              stats: Optional[QueryStats] = None) -> List[NnMatch]:
        qv = self.table.query_hash_vector(q)
        rng = None
        found = []
        visited = 0
        for g in range(self.num_grids):
            key = self._keys(qv[None, :], self.rotations[g], self.shifts[g])[0]
            bucket = self.buckets[g].get(key.tobytes())
            if bucket is None:
                continue
            visited += 1
            if len(bucket) > max_per_cell:
                if rng is None:
                    rng = np.random.default_rng([self.seed, sample_seed])
                bucket = rng.choice(bucket, size=max_per_cell, replace=False)
            found.append(bucket)
        if stats is not None:
            stats.visited_cells = visited
        if not found:
            if stats is not None:
                stats.scanned_rows = 0
            return []
        cand = np.unique(np.concatenate(found))
        if stats is not None:
            stats.scanned_rows = len(cand)
        return rank_rows(self.table, q, cand, k, keypoint_id)


def rg_query(index: RandomGridsIndex, q: AugmentedDescriptor, k: int,
             keypoint_id: int = 0, max_per_cell: int = DEFAULT_MAX_PER_CELL,
             sample_seed: int = 0,
             stats: Optional[QueryStats] = None) -> List[NnMatch]:
    return index.query(q, k, keypoint_id, max_per_cell, sample_seed, stats)
