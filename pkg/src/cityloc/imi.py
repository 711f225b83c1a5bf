"""Inverted multi-index over tile descriptors.

Two small vocabularies, one per half of the descriptor, form a product
vocabulary of n_words^2 cells.  Queries enumerate product words in ascending
combined distance with the standard multi-sequence traversal and scan their
postings lists; final candidate distances are exact augmented distances.
"""

from __future__ import annotations

import heapq
from typing import Dict, List, Optional, Tuple

import numpy as np

from .clustering import kmeans
from .matching import AugmentedDescriptor, DescriptorTable, NnMatch, QueryStats, rank_rows

DEFAULT_WORDS_PER_VOCAB = 1000


def _half_distances(x: np.ndarray, vocab: np.ndarray) -> np.ndarray:
    d2 = (np.sum(x * x) - 2.0 * vocab @ x + np.sum(vocab * vocab, axis=1))
    return np.maximum(d2, 0.0)


class InvertedMultiIndex:
    def __init__(self, table: DescriptorTable, n_words: int = DEFAULT_WORDS_PER_VOCAB,
                 seed: int = 0, train_sample: int = 20000,
                 restarts: int = 2, iters: int = 25):
        self.table = table
        d = table.descriptor_dim
        if d % 2 != 0:
            raise ValueError("descriptor dimension must be even for two vocabularies")
        self.half = d // 2
        if table.num_rows == 0:
            self.n_words = 1
            self.vocabs = [np.zeros((1, self.half)), np.zeros((1, d - self.half))]
            self._rows = np.zeros(0, dtype=np.int64)
            self._cells = {}
            return
        n_words = min(n_words, max(1, table.num_rows))
        self.n_words = n_words
        rng = np.random.default_rng(seed)
        train = table.vectors
        if len(train) > train_sample:
            train = train[rng.choice(len(train), size=train_sample,
                                     replace=False)]
        self.vocabs = []
        for part in (train[:, :self.half], train[:, self.half:]):
            centers, _, _ = kmeans(part, n_words, rng, restarts=restarts,
                                   iters=iters)
            order = np.lexsort(centers.T[::-1])
            self.vocabs.append(centers[order])
        w1 = self._assign(table.vectors[:, :self.half], 0)
        w2 = self._assign(table.vectors[:, self.half:], 1)
        product = w1 * n_words + w2
        order = np.argsort(product, kind="stable")
        self._rows = order.astype(np.int64)
        self._cells: Dict[int, Tuple[int, int]] = {}
        uniq, starts = np.unique(product[order], return_index=True)
        ends = np.append(starts[1:], len(order))
        for u, s, e in zip(uniq, starts, ends):
            self._cells[int(u)] = (int(s), int(e))

    def _assign(self, x: np.ndarray, vocab_idx: int) -> np.ndarray:
        from .clustering import assign_labels
        return assign_labels(x, self.vocabs[vocab_idx])[0]

    def postings(self, word1: int, word2: int) -> np.ndarray:
        span = self._cells.get(word1 * self.n_words + word2)
        if span is None:
            return np.zeros(0, dtype=np.int64)
        return self._rows[span[0]:span[1]]

    def word_distances(self, q: AugmentedDescriptor) -> Tuple[np.ndarray, np.ndarray]:
        """Squared distances from the query halves to each vocabulary."""
        return (_half_distances(q.desc[:self.half], self.vocabs[0]),
                _half_distances(q.desc[self.half:], self.vocabs[1]))

    def enumerate_words(self, q: AugmentedDescriptor, limit: int):
        """Yield (word1, word2, combined squared distance) in ascending order
        via multi-sequence traversal."""
        d1, d2 = self.word_distances(q)
        o1, o2 = np.argsort(d1, kind="stable"), np.argsort(d2, kind="stable")
        s1, s2 = d1[o1], d2[o2]
        heap = [(s1[0] + s2[0], 0, 0)]
        seen = {(0, 0)}
        emitted = 0
        while heap and emitted < limit:
            dist, a, b = heapq.heappop(heap)
            yield int(o1[a]), int(o2[b]), float(dist)
            emitted += 1
            for na, nb in ((a + 1, b), (a, b + 1)):
                if na < self.n_words and nb < self.n_words and (na, nb) not in seen:
                    seen.add((na, nb))
                    heapq.heappush(heap, (s1[na] + s2[nb], na, nb))

    def second_word_distance_sq(self, q: AugmentedDescriptor) -> float:
        """Squared distance to the second-nearest product-word centroid
        (the reference distance of the vocabulary ratio test)."""
        words = list(self.enumerate_words(q, 2))
        return words[-1][2]

    def query(self, q: AugmentedDescriptor, num_product_words: int, k: int,
              keypoint_id: int = 0,
              stats: Optional[QueryStats] = None,
              max_scanned: Optional[int] = None) -> List[NnMatch]:
        """Scan the nearest ``num_product_words`` cells, return the k best.

        ``max_scanned`` optionally caps the total postings entries visited
        (runtime restriction); enumeration stops once the cap is reached.
        """
        rows: List[np.ndarray] = []
        scanned = 0
        visited = 0
        for w1, w2, _ in self.enumerate_words(q, num_product_words):
            visited += 1
            p = self.postings(w1, w2)
            if len(p):
                rows.append(p)
                scanned += len(p)
            if max_scanned is not None and scanned >= max_scanned:
                break
        if stats is not None:
            stats.scanned_rows = scanned
            stats.visited_cells = visited
        if not rows:
            return []
        cand = np.concatenate(rows)
        return rank_rows(self.table, q, cand, k, keypoint_id)


def imi_query(index: InvertedMultiIndex, q: AugmentedDescriptor,
              num_product_words: int, k: int, keypoint_id: int = 0,
              stats: Optional[QueryStats] = None) -> List[NnMatch]:
    return index.query(q, num_product_words, k, keypoint_id, stats)
