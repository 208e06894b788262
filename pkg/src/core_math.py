import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import LabelOutOfRange, ShapeMismatch, ZeroNormRow

logger = logging.getLogger(__name__)

NORM_EPSILON = 1e-12


@dataclass
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = as_dense(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeMismatch(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )

    def check_labels(self, num_classes):
        check_labels(self.labels, num_classes)
        return self


@dataclass
class LossAndGrad:
    loss: float
    grad_logits: np.ndarray
    grad_features: Optional[np.ndarray] = None
    grad_weights: Optional[np.ndarray] = None


def as_dense(m, dtype=None):
    """
    Return ``m`` as a 2-D C-contiguous float array.

    Float64 input stays float64 (gradient checks run at that precision);
    everything else becomes float32.
    """
    arr = np.asarray(m)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size:
        bad = labels[(labels < 0) | (labels >= num_classes)]
        if bad.size:
            raise LabelOutOfRange(bad[0], num_classes)
    return labels


def l2_normalize_rows(m, epsilon=NORM_EPSILON):
    m = as_dense(m)
    if m.size == 0:
        raise ShapeMismatch("cannot normalize an empty matrix")
    norms = np.sqrt(np.sum(m * m, axis=1))
    small = np.flatnonzero(norms < epsilon)
    if small.size:
        raise ZeroNormRow(small[0], norms[small[0]])
    return m / norms[:, None]


def l2_normalize_backward(m, grad_out, epsilon=NORM_EPSILON):
    """Backpropagate ``grad_out`` through ``y = m / ||m||`` row by row."""
    m = as_dense(m)
    grad_out = as_dense(grad_out, dtype=m.dtype)
    if grad_out.shape != m.shape:
        raise ShapeMismatch(f"gradient {grad_out.shape} vs input {m.shape}")
    norms = np.sqrt(np.sum(m * m, axis=1))
    small = np.flatnonzero(norms < epsilon)
    if small.size:
        raise ZeroNormRow(small[0], norms[small[0]])
    y = m / norms[:, None]
    radial = np.sum(y * grad_out, axis=1)
    return (grad_out - y * radial[:, None]) / norms[:, None]


def matmul(a, b, transpose_b=False):
    """
    Matrix product with a fixed summation order.

    Each output entry accumulates its inner-dimension terms from index 0
    upwards, one rounding per step, so the result does not depend on BLAS
    blocking and every entry depends only on its own row and column.
    """
    a = as_dense(a)
    b = as_dense(b, dtype=a.dtype)
    if transpose_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


def softmax_xent(logits, labels):
    logits = as_dense(logits)
    m, c = logits.shape
    labels = check_labels(labels, c)
    if labels.shape != (m,):
        raise ShapeMismatch(f"{m} logit rows but {labels.shape[0]} labels")

    shifted = logits - np.max(logits, axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = np.sum(exp, axis=1)
    rows = np.arange(m)
    per_row = np.log(total) - shifted[rows, labels]
    loss = float(np.mean(per_row))

    grad = exp / total[:, None]
    grad[rows, labels] -= 1
    grad /= m
    return LossAndGrad(loss=loss, grad_logits=grad.astype(logits.dtype, copy=False))


def fc_forward_backward(x, w, upstream=None):
    """
    Forward ``x·wᵀ`` and, when ``upstream`` is given, its gradients.

    Returns ``(logits, grad_x, grad_w)``; the gradients are None without
    ``upstream``.
    """
    x = as_dense(x)
    w = as_dense(w, dtype=x.dtype)
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"features {x.shape} vs weights {w.shape}")
    logits = matmul(x, w, transpose_b=True)
    if upstream is None:
        return logits, None, None
    upstream = as_dense(upstream, dtype=x.dtype)
    if upstream.shape != logits.shape:
        raise ShapeMismatch(f"upstream {upstream.shape} vs logits {logits.shape}")
    grad_x = matmul(upstream, w)
    grad_w = matmul(upstream.T, x)
    return logits, grad_x, grad_w


# Small multi-layer perceptron used as the feature extractor. Parameters are a
# list of {'weight': (out, in), 'bias': (out,)} dicts; hidden layers use tanh,
# the last layer is linear.

def init_mlp(layer_sizes, rng, dtype=np.float32):
    if len(layer_sizes) < 2:
        raise ShapeMismatch("an MLP needs at least an input and an output size")
    params = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.append({
            'weight': rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype),
            'bias': np.zeros(fan_out, dtype=dtype),
        })
    return params


def mlp_layer_sizes(params):
    sizes = [params[0]['weight'].shape[1]]
    for i, layer in enumerate(params):
        w, b = layer['weight'], layer['bias']
        if w.shape[1] != sizes[-1] or b.shape != (w.shape[0],):
            raise ShapeMismatch(f"layer {i} weight {w.shape} / bias {b.shape} inconsistent")
        sizes.append(w.shape[0])
    return sizes


def mlp_forward(params, x):
    """Return ``(features, cache)``; the cache feeds ``mlp_backward``."""
    x = as_dense(x)
    sizes = mlp_layer_sizes(params)
    if x.shape[1] != sizes[0]:
        raise ShapeMismatch(f"input width {x.shape[1]} but network expects {sizes[0]}")
    inputs = []
    h = x
    last = len(params) - 1
    for i, layer in enumerate(params):
        inputs.append(h)
        z = matmul(h, layer['weight'].astype(x.dtype, copy=False), transpose_b=True)
        z += layer['bias'].astype(x.dtype, copy=False)
        h = z if i == last else np.tanh(z)
    return h, {'inputs': inputs, 'output': h}


def mlp_backward(params, cache, grad_features):
    """Return ``(param_grads, grad_input)`` matching the parameter layout."""
    inputs = cache['inputs']
    grad = as_dense(grad_features, dtype=inputs[0].dtype)
    if grad.shape != cache['output'].shape:
        raise ShapeMismatch(f"gradient {grad.shape} vs features {cache['output'].shape}")
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        w = params[i]['weight'].astype(grad.dtype, copy=False)
        h_in = inputs[i]
        grads[i] = {
            'weight': matmul(grad.T, h_in),
            'bias': np.sum(grad, axis=0),
        }
        grad = matmul(grad, w)
        if i > 0:
            # inputs[i] is tanh of the previous pre-activation
            grad = grad * (1 - h_in * h_in)
    return grads, grad


def relative_error(a, b):
    """Norm-relative difference ``||a - b|| / max(||b||, tiny)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    denom = max(np.linalg.norm(b), np.finfo(np.float64).tiny)
    return float(np.linalg.norm(a - b) / denom)
