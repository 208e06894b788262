import numpy as np
import pytest
from numpy.testing import assert_array_equal

from core_math import l2_normalize_rows, matmul, relative_error, softmax_xent
from errors import InvalidParameter, LabelNotActive, MTooSmall
from knn_graph import KnnGraph, ShardLayout, build_graph_bruteforce, compress_graph
from knn_softmax import (ActiveSet, SelectionConfig, full_softmax_forward_backward, knn_softmax_forward_backward,
                         m_active_for, select_active_classes)


def random_graph(rng, n, k):
    w = l2_normalize_rows(rng.standard_normal((n, 8)).astype(np.float32))
    return build_graph_bruteforce(w, k)


class TestSelection:
    def test_m_equal_to_n_selects_everything(self, rng):
        g = random_graph(rng, 20, 3)
        active = select_active_classes(g, [1, 5, 5], SelectionConfig(20, rng_seed=3), 20)
        assert_array_equal(active.class_indices, np.arange(20))
        assert active.contains_all_labels

    def test_identical_labels_select_that_list(self, rng):
        g = random_graph(rng, 15, 3)
        active = select_active_classes(g, [7, 7, 7], SelectionConfig(3), 15)
        assert_array_equal(active.class_indices, np.sort(g.neighbors[7]))
        assert active.padded == 0

    def test_padding_is_disjoint_from_pool_and_deterministic(self, rng):
        g = random_graph(rng, 60, 4)
        labels = [3, 10, 11]
        cfg = SelectionConfig(30, rng_seed=9)
        first = select_active_classes(g, labels, cfg, 60)
        second = select_active_classes(g, labels, cfg, 60)
        assert_array_equal(first.class_indices, second.class_indices)
        assert len(first) == 30
        pool = set(np.concatenate([g.neighbors[y] for y in labels]).tolist())
        assert pool <= set(first.class_indices.tolist())
        assert first.padded == 30 - len(pool)
        assert len(set(first.class_indices.tolist())) == 30

    def test_truncation_keeps_labels_and_best_ranked(self):
        g = KnnGraph(num_classes=8, k=3, neighbors=[[0, 1, 2], [1, 3, 4], [2, 0, 1], [3, 1, 2],
                                                    [4, 5, 6], [5, 4, 6], [6, 7, 5], [7, 6, 5]])
        active = select_active_classes(g, [0, 4], SelectionConfig(4), 8)
        # labels 0 and 4 rank -1; rank-1 candidates 1 and 5 beat rank-2 ones
        assert_array_equal(active.class_indices, [0, 1, 4, 5])
        assert active.contains_all_labels

    def test_truncation_ties_broken_by_count_then_index(self):
        g = KnnGraph(num_classes=6, k=2, neighbors=[[0, 3], [1, 3], [2, 4], [3, 0], [4, 2], [5, 0]])
        active = select_active_classes(g, [0, 1, 2], SelectionConfig(4), 6)
        # 3 appears twice at rank 1, 4 once: 3 wins the last slot
        assert_array_equal(active.class_indices, [0, 1, 2, 3])

    def test_m_smaller_than_distinct_labels(self, rng):
        g = random_graph(rng, 10, 2)
        with pytest.raises(MTooSmall):
            select_active_classes(g, [1, 2, 3], SelectionConfig(2), 10)

    def test_m_larger_than_n_rejected(self, rng):
        g = random_graph(rng, 10, 2)
        with pytest.raises(InvalidParameter):
            select_active_classes(g, [1], SelectionConfig(11), 10)

    def test_compressed_shards_select_like_the_full_graph(self, rng):
        g = random_graph(rng, 50, 5)
        layout = ShardLayout(4, 50)
        compressed = [compress_graph(g, layout, p) for p in range(4)]
        labels = rng.integers(0, 50, size=8)
        for m in (8, 12, 40):
            cfg = SelectionConfig(m, rng_seed=2)
            assert_array_equal(select_active_classes(compressed, labels, cfg, 50).class_indices,
                               select_active_classes(g, labels, cfg, 50).class_indices)

    def test_local_labels_reports_missing(self):
        active = ActiveSet(np.array([1, 4, 6]), True)
        assert_array_equal(active.local_labels([6, 1]), [2, 0])
        with pytest.raises(LabelNotActive):
            active.local_labels([5])


class TestKnnSoftmax:
    def test_all_classes_active_equals_full_softmax_exactly(self, rng):
        x = l2_normalize_rows(rng.standard_normal((6, 5)).astype(np.float32))
        w = l2_normalize_rows(rng.standard_normal((9, 5)).astype(np.float32))
        labels = rng.integers(0, 9, size=6)
        knn = knn_softmax_forward_backward(x, w, labels, ActiveSet(np.arange(9), True), scale=30.0)
        full = full_softmax_forward_backward(x, w, labels, scale=30.0)
        assert knn.loss == full.loss
        assert_array_equal(knn.grad_features, full.grad_features)
        assert_array_equal(knn.grad_weights, full.grad_weights)

    def test_full_softmax_is_scaled_cosine_softmax(self, rng):
        x = l2_normalize_rows(rng.standard_normal((4, 3)).astype(np.float32))
        w = l2_normalize_rows(rng.standard_normal((5, 3)).astype(np.float32))
        labels = [0, 1, 2, 3]
        expected = softmax_xent(30.0 * matmul(x, w, transpose_b=True), labels)
        assert full_softmax_forward_backward(x, w, labels).loss == expected.loss

    def test_single_active_class_has_zero_loss(self, rng):
        x = l2_normalize_rows(rng.standard_normal((1, 4)))
        w = l2_normalize_rows(rng.standard_normal((6, 4)))
        result = knn_softmax_forward_backward(x, w, [2], ActiveSet(np.array([2]), True))
        assert result.loss == 0.0
        assert np.all(result.grad_weights == 0)

    def test_uniform_logits_give_log_c(self):
        x = np.array([[1.0, 0.0]])
        w = np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 1.0]])
        assert full_softmax_forward_backward(x, w, [0]).loss == pytest.approx(np.log(3))

    def test_label_not_active(self, rng):
        x = l2_normalize_rows(rng.standard_normal((2, 3)))
        w = l2_normalize_rows(rng.standard_normal((5, 3)))
        with pytest.raises(LabelNotActive):
            knn_softmax_forward_backward(x, w, [0, 4], ActiveSet(np.array([0, 1]), True))

    @pytest.mark.parametrize('seed', range(50))
    def test_active_subspace_gradients_finite_difference(self, seed, numeric_grad):
        rng = np.random.default_rng(seed)
        n, m_active, d = 200, 40, 6
        x = l2_normalize_rows(rng.standard_normal((3, d)))
        w = l2_normalize_rows(rng.standard_normal((n, d)))
        labels = rng.choice(n, size=3, replace=False)
        others = rng.choice(np.setdiff1d(np.arange(n), labels), size=m_active - 3, replace=False)
        active = ActiveSet(np.sort(np.concatenate([labels, others])), True)
        scale = 4.0

        result = knn_softmax_forward_backward(x, w, labels, active, scale)
        outside = np.setdiff1d(np.arange(n), active.class_indices)
        assert np.all(result.grad_weights[outside] == 0)

        def loss():
            return knn_softmax_forward_backward(x, w, labels, active, scale).loss

        assert relative_error(result.grad_features, numeric_grad(loss, x)) < 1e-3
        sub = w[active.class_indices]

        def sub_loss():
            full = w.copy()
            full[active.class_indices] = sub
            return knn_softmax_forward_backward(x, full, labels, active, scale).loss

        assert relative_error(result.grad_weights[active.class_indices], numeric_grad(sub_loss, sub)) < 1e-3


def test_m_active_for_fraction_and_batch_floor():
    assert m_active_for(1000, 0.1, 32) == 100
    assert m_active_for(1000, 0.1, 512) == 512
    assert m_active_for(100, 1.0, 32) == 100
    assert m_active_for(50, 0.1, 64) == 50
