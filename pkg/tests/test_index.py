"""Brute-force oracle, inverted multi-index and random grids."""

import numpy as np
import pytest

from cityloc.imi import InvertedMultiIndex, imi_query
from cityloc.matching import (
    AugmentConfig,
    DescriptorTable,
    NnMatch,
    QueryStats,
    augment_query,
    brute_force_knn,
    filter_matches,
)
from cityloc.pq import pq_encode, train_pq
from cityloc.random_grids import RandomGridsIndex, default_cell_width, rg_query

from conftest import make_descriptor_tile

NO_CHANNELS = AugmentConfig(use_orientation=False, use_prior=False)


def oracle_scan(table, q, k):
    """Independent O(nk) reference: repeated min extraction."""
    d = np.array([table.distances(q, np.array([r]))[0]
                  for r in range(table.num_rows)])
    keys = list(zip(d, table.lm_ids, np.arange(table.num_rows)))
    out = []
    for _ in range(min(k, len(keys))):
        best = min(keys)
        keys.remove(best)
        out.append(NnMatch(0, int(best[1]), int(best[2]), float(best[0])))
    return out


class TestBruteForce:
    def test_exact_duplicate_first(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=20)
        table = DescriptorTable(tile, NO_CHANNELS)
        q = augment_query(table.vectors[7], NO_CHANNELS)
        m = brute_force_knn(table, q, k=3)
        assert m[0].descriptor_ref == 7
        assert m[0].distance_sq < 1e-12

    def test_k_larger_than_table(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=5, desc_per_lm=2)
        table = DescriptorTable(tile, NO_CHANNELS)
        q = augment_query(rng.normal(size=16), NO_CHANNELS)
        assert len(brute_force_knn(table, q, k=100)) == 10

    def test_matches_independent_scan(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=40, desc_per_lm=2)
        cfg = AugmentConfig()
        table = DescriptorTable(tile, cfg)
        for _ in range(5):
            q = augment_query(rng.normal(size=16), cfg,
                              orientation=float(rng.uniform(-np.pi, np.pi)),
                              prior_xy=rng.uniform(0, 150, size=2))
            got = brute_force_knn(table, q, k=7)
            want = oracle_scan(table, q, 7)
            assert [(m.landmark_id, m.descriptor_ref) for m in got] == \
                   [(m.landmark_id, m.descriptor_ref) for m in want]
            assert np.allclose([m.distance_sq for m in got],
                               [m.distance_sq for m in want], atol=1e-12)

    def test_empty_tile_rejected(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=1)
        tile.landmarks.clear()
        table = DescriptorTable(tile, NO_CHANNELS)
        with pytest.raises(ValueError):
            brute_force_knn(table, augment_query(np.zeros(16), NO_CHANNELS), 1)

    def test_channel_decomposition(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=10, desc_per_lm=1)
        cfg_full = AugmentConfig()
        cfg_rot = AugmentConfig(use_prior=False)
        cfg_none = NO_CHANNELS
        t_full = DescriptorTable(tile, cfg_full)
        t_rot = DescriptorTable(tile, cfg_rot)
        t_none = DescriptorTable(tile, cfg_none)
        d = rng.normal(size=16)
        theta = 0.7
        xy = np.array([30.0, 40.0])
        rows = np.arange(t_full.num_rows)
        full = t_full.distances(augment_query(d, cfg_full, theta, xy), rows)
        rot = t_rot.distances(augment_query(d, cfg_rot, theta), rows)
        none = t_none.distances(augment_query(d, cfg_none), rows)
        # disabling the prior channel removes exactly its term
        emb_q = np.array([np.cos(theta), np.sin(theta)])
        emb_db = np.stack([np.cos(t_full.orientations),
                           np.sin(t_full.orientations)], axis=1)
        rot_term = cfg_full.w_rot ** 2 * np.sum((emb_db - emb_q) ** 2, axis=1)
        prior_term = (cfg_full.w_gps / cfg_full.prior_radius) ** 2 * np.sum(
            (t_full.positions - xy) ** 2, axis=1)
        assert np.allclose(full, none + rot_term + prior_term, atol=1e-12)
        assert np.allclose(rot, none + rot_term, atol=1e-12)

    def test_pq_table_distances(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=30, desc_per_lm=2)
        flat = np.concatenate([lm.descriptors for lm in tile.landmarks])
        cb = train_pq(flat.astype(np.float64), m=2, k=16, seed=0)
        at = 0
        for lm in tile.landmarks:
            n = lm.num_descriptors
            lm.descriptors = pq_encode(cb, flat[at:at + n])
            at += n
        tile.pq = cb
        table = DescriptorTable(tile, NO_CHANNELS)
        q = augment_query(rng.normal(size=16), NO_CHANNELS)
        got = table.distances(q, np.arange(table.num_rows))
        from cityloc.pq import pq_distance
        want = pq_distance(cb, q.desc, table.codes)
        assert np.allclose(got, want, atol=1e-12)


class TestFilterMatches:
    def make(self, dists):
        return [NnMatch(0, i, i, d) for i, d in enumerate(dists)]

    def test_infinite_tau_identity(self):
        ms = self.make([0.1, 5.0, 100.0])
        assert filter_matches(ms, "absolute", tau=np.inf) == ms

    def test_zero_tau_keeps_duplicates_only(self):
        ms = self.make([0.0, 1e-9, 1.0])
        assert len(filter_matches(ms, "absolute", tau=0.0)) == 1

    def test_distribution_crossing(self, rng):
        inlier = rng.normal(0.2, 0.05, size=2000) ** 2
        outlier = rng.normal(1.0, 0.2, size=2000) ** 2
        tau = 0.6
        ms_in = self.make(inlier)
        ms_out = self.make(outlier)
        kept_in = len(filter_matches(ms_in, "absolute", tau=tau)) / len(ms_in)
        kept_out = len(filter_matches(ms_out, "absolute", tau=tau)) / len(ms_out)
        assert kept_in >= 0.95
        assert kept_out <= 0.2

    def test_ratio_mode_requires_index(self):
        with pytest.raises(ValueError):
            filter_matches(self.make([1.0]), "ratio")


class TestInvertedMultiIndex:
    def test_exhaustive_equals_bruteforce(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=60, desc_per_lm=2)
        table = DescriptorTable(tile, NO_CHANNELS)
        index = InvertedMultiIndex(table, n_words=8, seed=0)
        for _ in range(10):
            q = augment_query(rng.normal(size=16) * 0.5, NO_CHANNELS)
            got = imi_query(index, q, num_product_words=64, k=5)
            want = brute_force_knn(table, q, k=5)
            assert got == want

    def test_centroid_pair_enumerated_first(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=40, desc_per_lm=2)
        table = DescriptorTable(tile, NO_CHANNELS)
        index = InvertedMultiIndex(table, n_words=6, seed=0)
        q_desc = np.concatenate([index.vocabs[0][3], index.vocabs[1][5]])
        q = augment_query(q_desc, NO_CHANNELS)
        first = next(iter(index.enumerate_words(q, 1)))
        assert first[:2] == (3, 5)
        assert first[2] < 1e-12

    def test_recall_at_default_budget(self, rng):
        tile, gt = make_descriptor_tile(rng, n_landmarks=300, desc_per_lm=3,
                                        noise=0.03)
        table = DescriptorTable(tile, NO_CHANNELS)
        index = InvertedMultiIndex(table, n_words=20, seed=0)
        hits = 0
        trials = 100
        for i in range(trials):
            lm = int(rng.integers(300))
            q = augment_query(gt[lm] + rng.normal(scale=0.03, size=16),
                              NO_CHANNELS)
            want = brute_force_knn(table, q, k=1)[0]
            got = imi_query(index, q, num_product_words=40, k=1)
            hits += bool(got and got[0] == want)
        assert hits / trials >= 0.9

    def test_monotone_recall_in_budget(self, rng):
        tile, gt = make_descriptor_tile(rng, n_landmarks=200, desc_per_lm=2,
                                        noise=0.1)
        table = DescriptorTable(tile, NO_CHANNELS)
        index = InvertedMultiIndex(table, n_words=12, seed=0)
        queries = [augment_query(gt[int(rng.integers(200))]
                                 + rng.normal(scale=0.1, size=16), NO_CHANNELS)
                   for _ in range(50)]
        wants = [brute_force_knn(table, q, k=1)[0] for q in queries]
        recalls = []
        for budget in (1, 4, 16, 64, 144):
            hit = sum(bool(r and r[0] == w) for r, w in
                      ((imi_query(index, q, budget, 1), w)
                       for q, w in zip(queries, wants)))
            recalls.append(hit / len(queries))
        assert all(b >= a - 1e-12 for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] == 1.0

    def test_stats_and_runtime_cap(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=100, desc_per_lm=3)
        table = DescriptorTable(tile, NO_CHANNELS)
        index = InvertedMultiIndex(table, n_words=10, seed=0)
        q = augment_query(rng.normal(size=16), NO_CHANNELS)
        stats = QueryStats()
        index.query(q, num_product_words=100, k=3, stats=stats, max_scanned=20)
        assert stats.scanned_rows >= 20 or stats.visited_cells == 100
        assert stats.scanned_rows <= 20 + max(
            len(index.postings(w1, w2))
            for w1 in range(10) for w2 in range(10))


class TestRandomGrids:
    def test_stored_descriptor_collides_everywhere(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=50, desc_per_lm=2)
        table = DescriptorTable(tile, NO_CHANNELS)
        index = RandomGridsIndex(table, cell_width=0.5, num_grids=6, seed=0)
        q = augment_query(table.vectors[13], NO_CHANNELS)
        stats = QueryStats()
        got = rg_query(index, q, k=1, stats=stats)
        assert stats.visited_cells == 6
        assert got[0].descriptor_ref == 13
        assert got[0].distance_sq < 1e-12

    def test_far_query_can_miss(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=10, desc_per_lm=1)
        table = DescriptorTable(tile, NO_CHANNELS)
        w = 0.25
        index = RandomGridsIndex(table, cell_width=w, num_grids=4, seed=0)
        # a point farther than w*sqrt(D) from every stored vector can never
        # share a cell in any grid
        q = augment_query(np.full(16, 50.0), NO_CHANNELS)
        assert np.all(np.linalg.norm(table.vectors - q.desc, axis=1)
                      > w * np.sqrt(16))
        assert rg_query(index, q, k=1) == []

    def test_results_subset_of_bruteforce_with_same_distances(self, rng):
        tile, gt = make_descriptor_tile(rng, n_landmarks=80, desc_per_lm=2)
        cfg = AugmentConfig()
        table = DescriptorTable(tile, cfg)
        index = RandomGridsIndex(table, cell_width=0.8, num_grids=8, seed=0)
        for _ in range(10):
            lm = int(rng.integers(80))
            q = augment_query(gt[lm] + rng.normal(scale=0.05, size=16), cfg,
                              orientation=0.0, prior_xy=np.array([75.0, 75.0]))
            got = rg_query(index, q, k=10)
            full = {(m.landmark_id, m.descriptor_ref): m.distance_sq
                    for m in brute_force_knn(table, q, k=table.num_rows)}
            for m in got:
                assert abs(full[(m.landmark_id, m.descriptor_ref)]
                           - m.distance_sq) < 1e-12

    def test_deterministic_given_seed(self, rng):
        tile, _ = make_descriptor_tile(rng, n_landmarks=60, desc_per_lm=3)
        table = DescriptorTable(tile, NO_CHANNELS)
        a = RandomGridsIndex(table, cell_width=0.6, num_grids=5, seed=7)
        b = RandomGridsIndex(table, cell_width=0.6, num_grids=5, seed=7)
        q = augment_query(rng.normal(size=16) * 0.3, NO_CHANNELS)
        assert rg_query(a, q, k=5, max_per_cell=3, sample_seed=11) == \
               rg_query(b, q, k=5, max_per_cell=3, sample_seed=11)

    def test_default_cell_width(self):
        assert default_cell_width(0.8, 16) == pytest.approx(0.4)
