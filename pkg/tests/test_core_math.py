import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import log_softmax, softmax

from core_math import (LabeledBatch, fc_forward_backward, init_mlp, l2_normalize_backward, l2_normalize_rows,
                       matmul, mlp_backward, mlp_forward, relative_error, softmax_xent)
from errors import LabelOutOfRange, ShapeMismatch, ZeroNormRow


def test_l2_normalize_rows_gives_unit_rows(rng):
    m = rng.standard_normal((20, 7)).astype(np.float32)
    out = l2_normalize_rows(m)
    assert out.dtype == np.float32
    assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=1e-6)


def test_l2_normalize_rows_already_unit():
    m = np.eye(3, dtype=np.float32)
    assert_array_equal(l2_normalize_rows(m), m)


def test_l2_normalize_rows_zero_row_reports_index():
    m = np.ones((4, 3), dtype=np.float32)
    m[2] = 0
    with pytest.raises(ZeroNormRow) as excinfo:
        l2_normalize_rows(m)
    assert excinfo.value.row_index == 2


def test_matmul_matches_numpy(rng):
    a = rng.standard_normal((6, 9)).astype(np.float32)
    b = rng.standard_normal((9, 4)).astype(np.float32)
    assert_allclose(matmul(a, b), a @ b, rtol=1e-5, atol=1e-5)
    c = rng.standard_normal((5, 9)).astype(np.float32)
    assert_allclose(matmul(a, c, transpose_b=True), a @ c.T, rtol=1e-5, atol=1e-5)


def test_matmul_is_bit_reproducible_and_row_independent(rng):
    a = rng.standard_normal((8, 16)).astype(np.float32)
    b = rng.standard_normal((16, 5)).astype(np.float32)
    full = matmul(a, b)
    assert_array_equal(full, matmul(a, b))
    # a row's result does not depend on the other rows in the batch
    assert_array_equal(full[3:5], matmul(a[3:5], b))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_empty_inner_dimension_gives_zeros():
    out = matmul(np.ones((2, 0), dtype=np.float32), np.ones((0, 3), dtype=np.float32))
    assert_array_equal(out, np.zeros((2, 3), dtype=np.float32))


def test_softmax_xent_matches_scipy(rng):
    logits = rng.standard_normal((10, 6))
    labels = rng.integers(0, 6, size=10)
    result = softmax_xent(logits, labels)
    expected = -np.mean(log_softmax(logits, axis=1)[np.arange(10), labels])
    assert result.loss == pytest.approx(expected, rel=1e-12)
    onehot = np.eye(6)[labels]
    assert_allclose(result.grad_logits, (softmax(logits, axis=1) - onehot) / 10, atol=1e-12)


def test_softmax_xent_uniform_logits_loss_is_log_c():
    result = softmax_xent(np.zeros((1, 3)), [0])
    assert result.loss == pytest.approx(np.log(3))
    assert_allclose(result.grad_logits, [[-2 / 3, 1 / 3, 1 / 3]])


def test_softmax_xent_confident_logits():
    result = softmax_xent(np.array([[10.0, 0.0]]), [0])
    assert result.loss == pytest.approx(4.54e-5, rel=1e-2)


def test_softmax_xent_large_logits_stay_finite():
    result = softmax_xent(np.array([[1000.0, 0.0], [0.0, 1000.0]], dtype=np.float32), [0, 0])
    assert np.isfinite(result.loss)
    assert np.all(np.isfinite(result.grad_logits))


def test_softmax_xent_rows_sum_to_zero(rng):
    result = softmax_xent(rng.standard_normal((7, 5)), rng.integers(0, 5, size=7))
    assert_allclose(result.grad_logits.sum(axis=1), 0.0, atol=1e-12)


def test_softmax_xent_label_out_of_range():
    with pytest.raises(LabelOutOfRange):
        softmax_xent(np.zeros((2, 3)), [0, 3])


def test_labeled_batch_checks_shapes():
    with pytest.raises(ShapeMismatch):
        LabeledBatch(np.zeros((3, 2)), [0, 1])


@pytest.mark.parametrize('seed', range(50))
def test_softmax_gradient_finite_difference(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    m, c = rng.integers(1, 6), rng.integers(2, 8)
    logits = rng.standard_normal((m, c)) * 3
    labels = rng.integers(0, c, size=m)
    analytic = softmax_xent(logits, labels).grad_logits
    numeric = numeric_grad(lambda: softmax_xent(logits, labels).loss, logits)
    assert relative_error(analytic, numeric) < 1e-3


@pytest.mark.parametrize('seed', range(50))
def test_fc_gradient_finite_difference(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    m, c, d = rng.integers(1, 5), rng.integers(2, 6), rng.integers(2, 6)
    x = rng.standard_normal((m, d))
    w = rng.standard_normal((c, d))
    upstream = rng.standard_normal((m, c))

    def loss():
        return float(np.sum(fc_forward_backward(x, w)[0] * upstream))

    _, grad_x, grad_w = fc_forward_backward(x, w, upstream)
    assert relative_error(grad_x, numeric_grad(loss, x)) < 1e-3
    assert relative_error(grad_w, numeric_grad(loss, w)) < 1e-3


def test_fc_forward_without_upstream_returns_no_gradients(rng):
    logits, grad_x, grad_w = fc_forward_backward(rng.standard_normal((2, 3)), rng.standard_normal((4, 3)))
    assert logits.shape == (2, 4)
    assert grad_x is None and grad_w is None


@pytest.mark.parametrize('seed', range(50))
def test_l2_normalize_backward_finite_difference(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4))
    upstream = rng.standard_normal((3, 4))
    analytic = l2_normalize_backward(x, upstream)
    numeric = numeric_grad(lambda: float(np.sum(l2_normalize_rows(x) * upstream)), x)
    assert relative_error(analytic, numeric) < 1e-3


@pytest.mark.parametrize('seed', range(50))
def test_mlp_gradient_finite_difference(seed, numeric_grad):
    rng = np.random.default_rng(seed)
    sizes = [3, 5, 4] if seed % 2 else [3, 4, 5, 2]
    params = init_mlp(sizes, rng, dtype=np.float64)
    for layer in params:
        layer['bias'] = rng.standard_normal(layer['bias'].shape)
    x = rng.standard_normal((4, sizes[0]))
    upstream = rng.standard_normal((4, sizes[-1]))

    def loss():
        return float(np.sum(mlp_forward(params, x)[0] * upstream))

    _, cache = mlp_forward(params, x)
    grads, grad_input = mlp_backward(params, cache, upstream)
    for layer, grad in zip(params, grads):
        assert relative_error(grad['weight'], numeric_grad(loss, layer['weight'])) < 1e-3
        assert relative_error(grad['bias'], numeric_grad(loss, layer['bias'])) < 1e-3
    assert relative_error(grad_input, numeric_grad(loss, x)) < 1e-3


def test_mlp_forward_rejects_wrong_width(rng):
    params = init_mlp([4, 3], rng)
    with pytest.raises(ShapeMismatch):
        mlp_forward(params, np.zeros((2, 5), dtype=np.float32))


def test_relative_error_is_norm_relative():
    assert relative_error([1.0, 1.0], [1.0, 1.0]) == 0.0
    assert relative_error([2.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)
    with pytest.raises(ShapeMismatch):
        relative_error([1.0], [1.0, 2.0])
