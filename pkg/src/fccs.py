"""
Fast continuous convergence: warm-up learning rate, cosine batch-size
growth, LARS local rates, gradient accumulation and the optimizer steps.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import InvalidParameter, ShapeMismatch

logger = logging.getLogger(__name__)

UNITS = ('iteration', 'epoch')
POLICIES = ('fccs', 'fccs_no_batch', 'piecewise', 'adam')


@dataclass
class FccsSchedule:
    eta0: float
    t_warm: float
    b0: int
    t_ini: float
    t_final: float
    b_min1: int
    b_max1: int
    increasing_variant: bool = True
    unit: str = 'epoch'

    def __post_init__(self):
        if self.eta0 <= 0:
            raise InvalidParameter(f"eta0 must be positive, got {self.eta0}")
        if self.t_ini > self.t_final:
            raise InvalidParameter(f"t_ini={self.t_ini} is after t_final={self.t_final}")
        if self.b_min1 > self.b_max1:
            raise InvalidParameter(f"b_min1={self.b_min1} exceeds b_max1={self.b_max1}")
        if min(self.b0, self.b_min1) < 1:
            raise InvalidParameter("batch sizes must be positive")
        if self.unit not in UNITS:
            raise InvalidParameter(f"unit must be one of {UNITS}, got {self.unit!r}")

    @classmethod
    def growth(cls, eta0, b0, growth=64, t_final=8, t_warm=1, t_ini=1, **kwargs):
        """The B_max = growth x B_min = growth x B0 setting."""
        return cls(eta0=eta0, t_warm=t_warm, b0=b0, t_ini=t_ini, t_final=t_final,
                   b_min1=b0, b_max1=growth * b0, **kwargs)


@dataclass
class LarsConfig:
    trust_coefficient: float = 0.001
    weight_decay: float = 0.0
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.trust_coefficient <= 0:
            raise InvalidParameter("trust_coefficient must be positive")


def learning_rate(s, t):
    if t < 0:
        raise InvalidParameter(f"t must be non-negative, got {t}")
    if t < s.t_warm:
        return t / s.t_warm * s.eta0
    return s.eta0


def batch_size(s, t):
    if t < 0:
        raise InvalidParameter(f"t must be non-negative, got {t}")
    if t < s.t_ini:
        return s.b0
    if s.t_final == s.t_ini:
        return s.b_max1 if s.increasing_variant else s.b_min1
    progress = (min(t, s.t_final) - s.t_ini) / (s.t_final - s.t_ini)
    cos = math.cos(math.pi * progress)
    factor = (1 - cos) if s.increasing_variant else (1 + cos)
    f = s.b_min1 + 0.5 * (s.b_max1 - s.b_min1) * factor
    # cos(pi/2) is 6e-17, not 0; keep the exact midpoint on its integer
    return int(math.floor(f + 1e-9))


def piecewise_decay_lr(eta0, epoch, step_epochs=5, factor=0.1):
    return eta0 * factor ** int(epoch // step_epochs)


def policy_rate_and_batch(policy, s, position, epoch, adam_lr=1e-3, step_epochs=5, factor=0.1):
    """
    Learning rate and batch size of a training policy at a schedule position.

    ``position`` is in the schedule unit (fractional epochs for the epoch
    unit); ``epoch`` is the integer epoch index.
    """
    t_batch = epoch if s.unit == 'epoch' else position
    if policy == 'fccs':
        return learning_rate(s, position), batch_size(s, t_batch)
    if policy == 'fccs_no_batch':
        return learning_rate(s, position), s.b0
    if policy == 'piecewise':
        return piecewise_decay_lr(s.eta0, epoch, step_epochs, factor), s.b0
    if policy == 'adam':
        return adam_lr, s.b0
    raise InvalidParameter(f"unknown policy {policy!r}; expected one of {POLICIES}")


def iterate_schedule(s, n_train, epochs, policy='fccs', **policy_kwargs):
    """
    Yield one dict per optimizer step: step, epoch, position, lr, batch_size.

    With the epoch unit, each epoch draws its batch size once (at the epoch
    boundary) and covers the training set in ceil(n_train / B) steps; the
    learning rate follows the fractional epoch position. With the iteration
    unit, both follow the global step index.
    """
    step = 0
    for epoch in range(epochs):
        if s.unit == 'epoch':
            _, b = policy_rate_and_batch(policy, s, epoch, epoch, **policy_kwargs)
            steps = max(1, math.ceil(n_train / b))
            for i in range(steps):
                position = epoch + i / steps
                lr, _ = policy_rate_and_batch(policy, s, position, epoch, **policy_kwargs)
                yield {'step': step, 'epoch': epoch, 'position': position, 'lr': lr, 'batch_size': b}
                step += 1
        else:
            seen = 0
            while seen < n_train:
                lr, b = policy_rate_and_batch(policy, s, step, epoch, **policy_kwargs)
                yield {'step': step, 'epoch': epoch, 'position': float(step), 'lr': lr, 'batch_size': b}
                seen += b
                step += 1


def schedule_frame(s, n_train, epochs, policy='fccs', **policy_kwargs):
    return pd.DataFrame(list(iterate_schedule(s, n_train, epochs, policy, **policy_kwargs)),
                        columns=['step', 'epoch', 'position', 'lr', 'batch_size'])


def export_schedule(s, n_train, epochs, filename, policy='fccs', **policy_kwargs):
    df = schedule_frame(s, n_train, epochs, policy, **policy_kwargs)
    df.to_csv(filename, index=False)
    logger.info("schedule with %d steps written to %s", len(df), filename)
    return df


def lars_local_lr(cfg, w_norm, g_norm):
    if w_norm < 0 or g_norm < 0:
        raise InvalidParameter("norms must be non-negative")
    return cfg.trust_coefficient * w_norm / (g_norm + cfg.weight_decay * w_norm + cfg.epsilon)


def _as_list(grad):
    return list(grad) if isinstance(grad, (list, tuple)) else [grad]


def accumulate_gradients(n, micro_grads, weights=None):
    """
    Combine ``n`` micro-batch mean gradients into the effective gradient.

    Each entry of ``micro_grads`` is an array or a list of arrays (one per
    parameter). Without ``weights`` this is the plain mean; with the micro
    batch sizes as weights it is the mean gradient over all their samples.
    """
    if n != len(micro_grads) or n < 1:
        raise ShapeMismatch(f"expected {n} micro-batch gradients, got {len(micro_grads)}")
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,) or np.any(weights < 0) or weights.sum() == 0:
        raise InvalidParameter("accumulation weights must be n non-negative values with a positive sum")
    single = not isinstance(micro_grads[0], (list, tuple))
    parts = [_as_list(g) for g in micro_grads]
    shapes = [tuple(np.shape(a) for a in p) for p in parts]
    if len(set(shapes)) != 1:
        raise ShapeMismatch(f"micro-batch gradients disagree on shapes: {shapes[0]} vs {shapes[-1]}")
    total = weights.sum()
    out = []
    for i in range(len(parts[0])):
        acc = np.asarray(parts[0][i]) * (weights[0] / total)
        for j in range(1, n):
            acc = acc + np.asarray(parts[j][i]) * (weights[j] / total)
        out.append(acc.astype(np.asarray(parts[0][i]).dtype, copy=False))
    return out[0] if single else out


def sgd_momentum_step(params, grad, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """
    v <- momentum * v + grad + weight_decay * params; params <- params - lr * v.

    Returns ``(new_params, new_velocity)``; inputs are left untouched.
    """
    params = np.asarray(params)
    grad = np.asarray(grad, dtype=params.dtype)
    if grad.shape != params.shape:
        raise ShapeMismatch(f"gradient {grad.shape} vs parameters {params.shape}")
    if velocity is None:
        velocity = np.zeros_like(params)
    elif np.shape(velocity) != params.shape:
        raise ShapeMismatch(f"velocity {np.shape(velocity)} vs parameters {params.shape}")
    dtype = params.dtype
    v = (momentum * velocity + grad + weight_decay * params).astype(dtype, copy=False)
    return (params - dtype.type(lr) * v).astype(dtype, copy=False), v


def adam_step(params, grad, lr, state, beta1=0.9, beta2=0.999, epsilon=1e-8, weight_decay=0.0):
    """
    Standard Adam; ``state`` is a dict with 'm', 'v' and 't', created on
    first use and updated in place. Returns the new parameters.
    """
    params = np.asarray(params)
    grad = np.asarray(grad, dtype=params.dtype) + weight_decay * params
    if grad.shape != params.shape:
        raise ShapeMismatch(f"gradient {grad.shape} vs parameters {params.shape}")
    if 'm' not in state:
        state['m'] = np.zeros_like(params)
        state['v'] = np.zeros_like(params)
        state['t'] = 0
    state['t'] += 1
    state['m'] = beta1 * state['m'] + (1 - beta1) * grad
    state['v'] = beta2 * state['v'] + (1 - beta2) * grad * grad
    m_hat = state['m'] / (1 - beta1 ** state['t'])
    v_hat = state['v'] / (1 - beta2 ** state['t'])
    return (params - lr * m_hat / (np.sqrt(v_hat) + epsilon)).astype(params.dtype, copy=False)
