import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from sklearn.neighbors import NearestNeighbors

from core_math import l2_normalize_rows, matmul
from errors import DatasetIoError, EmptyShard, GraphFormatError, InvalidParameter, KTooLarge, LabelOutOfRange
from knn_graph import (KnnGraph, ShardLayout, build_graph_bruteforce, build_graph_ring, compress_graph,
                       graph_matches_weights, load_graph, merged_neighbor_lists, quick_access, save_graph)


def random_weights(rng, n, d=8):
    return l2_normalize_rows(rng.standard_normal((n, d)).astype(np.float32))


def sort_everything_oracle(w, k):
    scores = matmul(w, w, transpose_b=True)
    lists = []
    for j in range(w.shape[0]):
        others = [c for c in range(w.shape[0]) if c != j]
        others.sort(key=lambda c: (-scores[j, c], c))
        lists.append([j] + others[:k - 1])
    return np.array(lists)


class TestBruteForce:
    def test_orthonormal_rows_are_their_own_neighbors(self):
        g = build_graph_bruteforce(np.eye(3, dtype=np.float32), 1)
        assert_array_equal(g.neighbors, [[0], [1], [2]])

    def test_identical_rows_list_self_first(self):
        w = np.ones((2, 4), dtype=np.float32) / 2
        g = build_graph_bruteforce(w, 2)
        assert_array_equal(g.neighbors, [[0, 1], [1, 0]])

    def test_matches_sort_everything_oracle(self, rng):
        w = random_weights(rng, 50)
        g = build_graph_bruteforce(w, 5)
        assert_array_equal(g.neighbors, sort_everything_oracle(w, 5))

    def test_lists_have_no_duplicates(self, rng):
        g = build_graph_bruteforce(random_weights(rng, 30), 6)
        for row in g.neighbors:
            assert len(set(row.tolist())) == 6

    def test_k_too_large(self, rng):
        with pytest.raises(KTooLarge):
            build_graph_bruteforce(random_weights(rng, 4), 5)

    def test_inner_product_order_equals_euclidean_order(self, rng):
        w = random_weights(rng, 60, d=16)
        g = build_graph_bruteforce(w, 7)
        nn = NearestNeighbors(n_neighbors=7, algorithm='brute').fit(w)
        _, idx = nn.kneighbors(w)
        for row, expected in zip(g.neighbors, idx):
            assert set(row.tolist()) == set(expected.tolist())


class TestRing:
    @pytest.mark.parametrize('num_shards', [1, 2, 4, 8])
    @pytest.mark.parametrize('threaded', [False, True])
    def test_equals_bruteforce(self, rng, num_shards, threaded):
        w = random_weights(rng, 41)
        layout = ShardLayout(num_shards, 41)
        ring = build_graph_ring(layout.split_rows(w), 4, threaded=threaded)
        assert ring == build_graph_bruteforce(w, 4)

    def test_four_shards_n40_k3(self, rng):
        w = random_weights(rng, 40)
        ring = build_graph_ring(ShardLayout(4, 40).split_rows(w), 3, kprime=6)
        assert ring == build_graph_bruteforce(w, 3)

    def test_kprime_equal_to_k_is_still_exact(self, rng):
        w = random_weights(rng, 25)
        ring = build_graph_ring(ShardLayout(3, 25).split_rows(w), 5, kprime=5)
        assert ring == build_graph_bruteforce(w, 5)

    def test_duplicate_rows_break_ties_by_index(self):
        w = np.tile(np.array([[1.0, 0.0]], dtype=np.float32), (6, 1))
        ring = build_graph_ring(ShardLayout(3, 6).split_rows(w), 3)
        assert ring == build_graph_bruteforce(w, 3)
        assert_array_equal(ring.neighbors[4], [4, 0, 1])

    def test_kprime_below_k_rejected(self, rng):
        with pytest.raises(InvalidParameter):
            build_graph_ring([random_weights(rng, 10)], 4, kprime=3)

    def test_empty_shard_rejected(self, rng):
        with pytest.raises(EmptyShard):
            build_graph_ring([random_weights(rng, 5), np.zeros((0, 8), dtype=np.float32)], 2)

    def test_each_shard_receives_every_other_block_once(self, rng):
        stats = {}
        build_graph_ring(ShardLayout(4, 30).split_rows(random_weights(rng, 30)), 3, stats=stats)
        assert stats['transfers'] == [3, 3, 3, 3]

    def test_peak_candidate_memory_within_bound(self, rng):
        stats = {}
        build_graph_ring(ShardLayout(5, 53).split_rows(random_weights(rng, 53)), 4, kprime=7, stats=stats)
        for peak, bound in zip(stats['peak_candidate_entries'], stats['candidate_bound']):
            assert peak <= bound

    def test_uneven_shards_fill_but_never_exceed_the_bound(self, rng):
        w = random_weights(rng, 27)
        stats = {}
        ring = build_graph_ring([w[:2], w[2:22], w[22:]], 3, kprime=4, stats=stats)
        assert ring == build_graph_bruteforce(w, 3)
        # owned * k' + 20; scoring the 20-row block in one piece would need 2 * (4 + 20) on shard 0
        assert stats['candidate_bound'] == [28, 100, 40]
        assert stats['peak_candidate_entries'] == [28, 100, 40]


class TestLayout:
    def test_blocks_are_contiguous_and_balanced(self):
        layout = ShardLayout(3, 10)
        assert layout.sizes().tolist() == [4, 3, 3]
        assert_array_equal(layout.classes_of(1), [4, 5, 6])
        assert layout.shard_of(9) == 2

    def test_more_shards_than_classes(self):
        with pytest.raises(EmptyShard):
            ShardLayout(5, 3)


class TestCompression:
    def test_single_shard_keeps_everything(self, rng):
        g = build_graph_bruteforce(random_weights(rng, 12), 4)
        cg = compress_graph(g, ShardLayout(1, 12), 0)
        assert cg.k_per_class.tolist() == [4] * 12
        assert cg.flat_neighbors.size == 48
        for y in range(12):
            assert_array_equal(quick_access(cg, [y])[0], g.neighbors[y])

    def test_offsets_are_exclusive_prefix_sums(self):
        g = KnnGraph(num_classes=3, k=3, neighbors=[[0, 1, 2], [1, 0, 2], [2, 1, 0]])
        layout = ShardLayout(3, 3)
        # shard 0 owns class 0 only: one retained neighbor per class
        cg = compress_graph(g, layout, 0)
        assert cg.offsets.tolist() == [0, 1, 2]
        assert cg.offsets[0] == 0
        assert cg.flat_neighbors.size == cg.k_per_class.sum()

    def test_prefix_sums_over_uneven_counts(self):
        g = KnnGraph(num_classes=6, k=3, neighbors=[[0, 1, 3], [1, 0, 2], [2, 4, 5],
                                                   [3, 4, 5], [4, 3, 5], [5, 3, 4]])
        cg = compress_graph(g, ShardLayout(2, 6), 0)
        assert cg.k_per_class.tolist() == [2, 3, 1, 0, 0, 0]
        assert cg.offsets.tolist() == [0, 2, 5, 6, 6, 6]
        assert_array_equal(cg.slice(1), [1, 0, 2])
        assert_array_equal(cg.ranks(0), [0, 1])

    def test_union_of_shards_reconstructs_graph(self, rng):
        g = build_graph_bruteforce(random_weights(rng, 37), 6)
        layout = ShardLayout(4, 37)
        compressed = [compress_graph(g, layout, p) for p in range(4)]
        assert sum(cg.flat_neighbors.size for cg in compressed) == 37 * 6
        merged = merged_neighbor_lists(compressed, np.arange(37))
        assert_array_equal(np.stack(merged), g.neighbors)

    def test_quick_access_matches_pruned_2d_graph(self, rng):
        g = build_graph_bruteforce(random_weights(rng, 40), 5)
        layout = ShardLayout(4, 40)
        labels = rng.integers(0, 40, size=100)
        for p in range(4):
            cg = compress_graph(g, layout, p)
            for y, got in zip(labels, quick_access(cg, labels)):
                row = g.neighbors[y]
                assert_array_equal(got, row[layout.assignment[row] == p])

    def test_label_without_local_neighbors_gives_empty_slice(self):
        g = KnnGraph(num_classes=4, k=2, neighbors=[[0, 1], [1, 0], [2, 3], [3, 2]])
        cg = compress_graph(g, ShardLayout(2, 4), 1)
        assert quick_access(cg, [0])[0].size == 0

    def test_quick_access_label_out_of_range(self, rng):
        g = build_graph_bruteforce(random_weights(rng, 6), 2)
        with pytest.raises(LabelOutOfRange):
            quick_access(compress_graph(g, ShardLayout(1, 6), 0), [6])

    def test_csr_view_matches_offsets(self, rng):
        g = build_graph_bruteforce(random_weights(rng, 20), 4)
        cg = compress_graph(g, ShardLayout(2, 20), 1)
        csr = cg.to_csr()
        assert_array_equal(csr.indptr[:-1], cg.offsets)
        assert csr.nnz == cg.flat_neighbors.size
        row = csr.getrow(3)
        assert set(row.indices.tolist()) == set(cg.slice(3).tolist())


class TestGraphFile:
    def test_round_trip(self, rng, tmp_path):
        g = build_graph_bruteforce(random_weights(rng, 15), 3)
        path = tmp_path / 'graph.xknn'
        save_graph(g, str(path))
        assert path.read_bytes()[:4] == b'XKNN'
        assert load_graph(str(path)) == g

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.xknn'
        path.write_bytes(b'NOPE' + b'\0' * 20)
        with pytest.raises(GraphFormatError):
            load_graph(str(path))

    def test_truncated_file(self, rng, tmp_path):
        g = build_graph_bruteforce(random_weights(rng, 10), 3)
        path = tmp_path / 'graph.xknn'
        save_graph(g, str(path))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(GraphFormatError):
            load_graph(str(path))

    def test_body_not_whole_words(self, rng, tmp_path):
        g = build_graph_bruteforce(random_weights(rng, 10), 3)
        path = tmp_path / 'graph.xknn'
        save_graph(g, str(path))
        path.write_bytes(path.read_bytes() + b'\x01')
        with pytest.raises(GraphFormatError):
            load_graph(str(path))

    def test_neighbor_outside_the_class_range(self, tmp_path):
        path = tmp_path / 'graph.xknn'
        body = np.array([[2, 0, 5], [2, 1, 0]], dtype='<u4').tobytes()
        path.write_bytes(b'XKNN' + struct.pack('<IQ', 1, 2) + body)
        with pytest.raises(GraphFormatError):
            load_graph(str(path))

    def test_missing_file_is_an_io_error(self, tmp_path):
        with pytest.raises(DatasetIoError):
            load_graph(str(tmp_path / 'absent.xknn'))


class TestGraphMatchesWeights:
    def test_graph_of_the_same_weights_matches(self, rng):
        w = random_weights(rng, 30)
        assert graph_matches_weights(build_graph_bruteforce(w, 4), w)

    def test_graph_of_other_weights_does_not(self, rng):
        w = random_weights(rng, 30)
        other = build_graph_bruteforce(random_weights(rng, 30), 4)
        assert not graph_matches_weights(other, w, sample=30)

    def test_class_count_mismatch(self, rng):
        w = random_weights(rng, 30)
        assert not graph_matches_weights(build_graph_bruteforce(w[:20], 4), w)
