"""
Central finite-difference gradient checking for the tensor core.

Usage:
    max_error = check_gradients(lambda: reduce_sum(relu(x)), [x])
    assert max_error <= 1e-4
"""

import numpy as np

from acre.tensor import Tape, Tensor, backward, flatten, matmul, reduce_sum


def weighted_sum(t, weights):
    """Scalar sum(t * weights), built from taped ops so every entry matters."""
    column = Tensor(np.asarray(weights, dtype=float).reshape(-1, 1))
    return reduce_sum(matmul(flatten(t), column))


def numerical_gradient(loss_fn, tensor, eps=1e-5):
    grad = np.zeros_like(tensor.data)
    for index in np.ndindex(tensor.shape):
        original = tensor.data[index]
        tensor.data[index] = original + eps
        plus = loss_fn().item()
        tensor.data[index] = original - eps
        minus = loss_fn().item()
        tensor.data[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def analytic_gradients(loss_fn, tensors):
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(analytic, numeric):
    """Largest |a - n| / max(1, |a|, |n|) over all entries."""
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def check_gradients(loss_fn, tensors, eps=1e-5):
    """Return the worst relative error over all entries of all tensors."""
    analytic = analytic_gradients(loss_fn, tensors)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        worst = max(worst, relative_error(grad, numerical_gradient(loss_fn, tensor, eps)))
    return worst
