"""Graph construction, hubness scoring, and hub selection.

The planar toy used throughout: centers at angles {10, 50, 100} degrees,
neighbors at {0, 30, 90, 180}, k=2. Working out the angular gaps by hand
gives adjacency [[0,1], [1,2], [2,1]], so membership counts are (1, 3, 2, 0).
"""

import numpy as np
import pytest

from hubseg.core import FeatureMatrix, SeededRng
from hubseg.episodes import EpisodeConfig, generate_synthetic_episode
from hubseg.hubs import (
    HubSet,
    build_bipartite_knn,
    hub_counts,
    hubness_scores,
    mine_class_hubs,
    select_top_hubs,
)

from reference import brute_force_knn, planar


def unit(g, n, d):
    m = g.standard_normal((n, d))
    return FeatureMatrix(m / np.linalg.norm(m, axis=1, keepdims=True), normalized=True)


TOY_CENTERS = FeatureMatrix(planar([10, 50, 100]), normalized=True)
TOY_NEIGHBORS = FeatureMatrix(planar([0, 30, 90, 180]), normalized=True)


class TestBuildBipartiteKnn:
    def test_toy_adjacency(self):
        g = build_bipartite_knn(TOY_CENTERS, TOY_NEIGHBORS, k=2)
        assert [row.tolist() for row in g.adjacency] == [[0, 1], [1, 2], [2, 1]]
        assert (g.center_count, g.neighbor_count, g.k) == (3, 4, 2)

    def test_rows_are_readonly(self):
        g = build_bipartite_knn(TOY_CENTERS, TOY_NEIGHBORS, k=2)
        with pytest.raises(ValueError):
            g.adjacency[0][0] = 3

    def test_k_equals_neighbor_count_lists_everything(self):
        g = build_bipartite_knn(TOY_CENTERS, TOY_NEIGHBORS, k=4)
        for row in g.adjacency:
            assert sorted(row.tolist()) == [0, 1, 2, 3]

    def test_k_clamped(self):
        g = build_bipartite_knn(TOY_CENTERS, TOY_NEIGHBORS, k=50)
        assert all(len(row) == 4 for row in g.adjacency)

    def test_duplicate_neighbors_tie_to_lower_index(self):
        centers = FeatureMatrix(planar([0]), normalized=True)
        neighbors = FeatureMatrix(planar([0, 0, 90]), normalized=True)
        g = build_bipartite_knn(centers, neighbors, k=3)
        assert g.adjacency[0].tolist() == [0, 1, 2]

    def test_tie_at_the_cut(self):
        # both neighbors are bitwise identical; only the lower index survives
        centers = FeatureMatrix(planar([0]), normalized=True)
        neighbors = FeatureMatrix(planar([0, 0]), normalized=True)
        g = build_bipartite_knn(centers, neighbors, k=1)
        assert g.adjacency[0].tolist() == [0]

    def test_exclude_self(self):
        pts = unit(np.random.default_rng(1), 5, 3)
        g = build_bipartite_knn(pts, pts, k=5, exclude_self=True, self_map=np.arange(5))
        for i, row in enumerate(g.adjacency):
            assert i not in row.tolist()
            assert len(row) == 4

    def test_exclude_self_single_point(self):
        p = FeatureMatrix(planar([0]), normalized=True)
        g = build_bipartite_knn(p, p, k=1, exclude_self=True, self_map=np.array([0]))
        assert g.adjacency[0].tolist() == []

    def test_partial_self_map(self):
        # -1 entries mean "not present among the neighbors"
        pts = unit(np.random.default_rng(2), 4, 3)
        self_map = np.array([2, -1, -1, -1])
        g = build_bipartite_knn(pts, pts, k=4, exclude_self=True, self_map=self_map)
        assert 2 not in g.adjacency[0].tolist() and len(g.adjacency[0]) == 3
        assert len(g.adjacency[1]) == 4

    def test_empty_center_set(self):
        empty = FeatureMatrix(np.empty((0, 2)), normalized=True)
        g = build_bipartite_knn(empty, TOY_NEIGHBORS, k=2)
        assert g.adjacency == ()
        np.testing.assert_array_equal(hub_counts(g), np.zeros(4, dtype=np.int64))

    def test_input_validation(self):
        with pytest.raises(ValueError, match="k must be positive"):
            build_bipartite_knn(TOY_CENTERS, TOY_NEIGHBORS, k=0)
        with pytest.raises(ValueError, match="dimension mismatch"):
            build_bipartite_knn(
                TOY_CENTERS, FeatureMatrix(np.eye(3), normalized=True), k=1
            )
        with pytest.raises(ValueError, match="unit-normalized"):
            build_bipartite_knn(FeatureMatrix(planar([10])), TOY_NEIGHBORS, k=1)
        with pytest.raises(ValueError, match="self_map"):
            build_bipartite_knn(TOY_CENTERS, TOY_NEIGHBORS, k=1, exclude_self=True)

    def test_matches_brute_force_oracle(self):
        g = np.random.default_rng(7)
        for _ in range(80):
            nc, nn = int(g.integers(1, 30)), int(g.integers(1, 30))
            d = int(g.integers(2, 9))
            k = int(g.integers(1, nn + 2))
            centers, neighbors = unit(g, nc, d), unit(g, nn, d)
            got = build_bipartite_knn(centers, neighbors, k)
            want = brute_force_knn(centers.data, neighbors.data, k)
            assert [row.tolist() for row in got.adjacency] == want

    def test_oracle_with_duplicate_rows(self):
        # rows drawn with replacement from a small pool force exact ties
        g = np.random.default_rng(8)
        for _ in range(40):
            pool = unit(g, 4, 3).data
            nc, nn = int(g.integers(1, 12)), int(g.integers(2, 20))
            centers = FeatureMatrix(pool[g.integers(0, 4, nc)], normalized=True)
            neighbors = FeatureMatrix(pool[g.integers(0, 4, nn)], normalized=True)
            k = int(g.integers(1, nn + 1))
            got = build_bipartite_knn(centers, neighbors, k)
            want = brute_force_knn(centers.data, neighbors.data, k)
            assert [row.tolist() for row in got.adjacency] == want


class TestHubness:
    def test_toy_counts_and_scores(self):
        g = build_bipartite_knn(TOY_CENTERS, TOY_NEIGHBORS, k=2)
        np.testing.assert_array_equal(hub_counts(g), [1, 3, 2, 0])
        np.testing.assert_allclose(
            hubness_scores(g, epsilon=1e-6),
            np.array([1, 3, 2, 0]) + 1e-6,
            rtol=0,
            atol=0,
        )

    def test_counts_conserved(self):
        g = np.random.default_rng(11)
        for _ in range(300):
            nc, nn = int(g.integers(0, 25)), int(g.integers(1, 25))
            k = int(g.integers(1, nn + 3))
            graph = build_bipartite_knn(unit(g, nc, 4), unit(g, nn, 4), k)
            assert hub_counts(graph).sum() == nc * min(k, nn)

    def test_all_neighbors_listed_when_k_covers(self):
        g = build_bipartite_knn(TOY_CENTERS, TOY_NEIGHBORS, k=4)
        np.testing.assert_array_equal(hub_counts(g), [3, 3, 3, 3])

    def test_epsilon_must_be_positive(self):
        g = build_bipartite_knn(TOY_CENTERS, TOY_NEIGHBORS, k=2)
        with pytest.raises(ValueError, match="epsilon"):
            hubness_scores(g, epsilon=0.0)

    def test_permutation_equivariance(self):
        g = np.random.default_rng(13)
        for _ in range(30):
            nc, nn = int(g.integers(1, 20)), int(g.integers(2, 20))
            centers, neighbors = unit(g, nc, 5), unit(g, nn, 5)
            k = int(g.integers(1, nn + 1))
            perm = g.permutation(nn)
            base = hub_counts(build_bipartite_knn(centers, neighbors, k))
            shuffled = FeatureMatrix(neighbors.data[perm], normalized=True)
            moved = hub_counts(build_bipartite_knn(centers, shuffled, k))
            # row i of the shuffled matrix is old row perm[i]
            np.testing.assert_array_equal(moved, base[perm])


class TestSelectTopHubs:
    def test_toy_selection(self):
        scores = np.array([1, 3, 2, 0], dtype=np.float64) + 1e-6
        hubs = select_top_hubs(scores, eta=2)
        assert hubs.indices.tolist() == [1, 2]
        np.testing.assert_allclose(hubs.scores, scores[[1, 2]])

    def test_eta_clamps(self):
        hubs = select_top_hubs(np.array([0.5, 0.25]), eta=10)
        assert hubs.indices.tolist() == [0, 1]
        assert hubs.eta == 10

    def test_all_equal_breaks_to_lowest_indices(self):
        hubs = select_top_hubs(np.full(5, 2.0), eta=3)
        assert hubs.indices.tolist() == [0, 1, 2]

    def test_dominance(self):
        g = np.random.default_rng(17)
        for _ in range(100):
            scores = g.integers(0, 6, int(g.integers(1, 40))).astype(np.float64)
            eta = int(g.integers(1, scores.size + 1))
            hubs = select_top_hubs(scores, eta)
            outside = np.delete(scores, hubs.indices)
            if outside.size:
                assert hubs.scores.min() >= outside.max()

    def test_validation(self):
        with pytest.raises(ValueError, match="eta"):
            select_top_hubs(np.array([1.0]), eta=0)
        with pytest.raises(ValueError, match="1-D"):
            select_top_hubs(np.ones((2, 2)), eta=1)

    def test_hubset_rejects_mismatched_arrays(self):
        with pytest.raises(ValueError):
            HubSet(indices=np.array([1, 2]), scores=np.array([1.0]), eta=2)


class TestMineClassHubs:
    def make(self, **kw):
        defaults = dict(n_way=1, n_shot=1, n_query=1, points_per_cloud=8, dim=4, seed=5)
        defaults.update(kw)
        cfg = EpisodeConfig(**defaults)
        return generate_synthetic_episode(cfg, SeededRng(cfg.seed, 0))

    def test_class_pool_at_eta_takes_everything(self):
        # T=8 gives 4 foreground and 4 background support points
        e = self.make(points_per_cloud=8)
        hubs = mine_class_hubs(e, k=3, eta=4)
        assert sorted(hubs[1].indices.tolist()) == [0, 1, 2, 3]
        assert sorted(hubs[0].indices.tolist()) == [4, 5, 6, 7]

    def test_labels_cover_background_and_foreground(self):
        e = self.make(n_way=2, points_per_cloud=12)
        hubs = mine_class_hubs(e, k=3, eta=2)
        assert sorted(hubs) == [0, 1, 2]
        for hs in hubs.values():
            assert hs.count == 2

    def test_two_shot_budget_split(self):
        # shot rows: shot 0 occupies 0..39 (fg 0..19), shot 1 occupies 40..79
        e = self.make(n_shot=2, points_per_cloud=40)
        hubs = mine_class_hubs(e, k=5, eta=10)
        fg = hubs[1].indices
        assert fg.shape[0] == 10
        assert np.all(fg[:5] < 20)
        assert np.all((fg[5:] >= 40) & (fg[5:] < 60))

    def test_budget_remainder_goes_to_earlier_shots(self):
        e = self.make(n_shot=2, points_per_cloud=40)
        hubs = mine_class_hubs(e, k=5, eta=5)
        fg = hubs[1].indices
        assert np.count_nonzero(fg < 40) == 3
        assert np.count_nonzero(fg >= 40) == 2

    def test_eta_below_shot_count(self):
        e = self.make(n_shot=2, points_per_cloud=40)
        hubs = mine_class_hubs(e, k=5, eta=1)
        assert hubs[1].count == 1
        assert hubs[1].indices[0] < 40

    def test_scores_are_global(self):
        # the returned scores equal the global graph's hubness at those rows
        from hubseg.core import query_points, support_points

        e = self.make(points_per_cloud=16)
        k = 3
        hubs = mine_class_hubs(e, k=k, eta=4)
        qf, _ = query_points(e)
        sf, _, _ = support_points(e)
        scores = hubness_scores(build_bipartite_knn(qf, sf, k))
        for hs in hubs.values():
            np.testing.assert_allclose(hs.scores, scores[hs.indices], rtol=0, atol=0)

    def test_invalid_episode_rejected(self):
        from hubseg.core import ClassMask, Episode, LabeledCloud

        feats = FeatureMatrix(np.eye(2), normalized=True)
        cloud = LabeledCloud(feats, ClassMask(np.array([0, 0])))
        query = LabeledCloud(feats, ClassMask(np.array([1, 0])))
        bad = Episode(1, 1, ((cloud,),), (query,))
        with pytest.raises(ValueError, match="invalid episode"):
            mine_class_hubs(bad, k=1, eta=1)

    def test_hub_order_independent_of_query_row_order(self):
        from hubseg.core import ClassMask, Episode, LabeledCloud

        e = self.make(points_per_cloud=16, n_query=1)
        q = e.query[0]
        perm = np.random.default_rng(0).permutation(q.features.rows)
        shuffled = LabeledCloud(
            FeatureMatrix(q.features.data[perm], normalized=True),
            ClassMask(q.mask.labels[perm]),
        )
        e2 = Episode(e.n_way, e.n_shot, e.support, (shuffled,))
        a = mine_class_hubs(e, k=3, eta=4)
        b = mine_class_hubs(e2, k=3, eta=4)
        for c in a:
            np.testing.assert_array_equal(a[c].indices, b[c].indices)
