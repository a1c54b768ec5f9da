"""
Dense tensors with reverse-mode automatic differentiation.

Every operation used by the model lives here: elementwise activations,
affine maps, structural reshaping, dropout, batch normalization and the
dilated 2D convolution. Operations record themselves on the thread's active
Tape when any input requires a gradient; backward() replays the tape in
reverse order.

Usage:
    with Tape() as tape:
        loss = reduce_sum(sigmoid(affine(x, w, b)))
    backward(loss, tape)
"""

import logging
import threading
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TapeError

logger = logging.getLogger("acre.tensor")

_DEFAULT_DTYPE = np.float64
DEBUG_CHECKS = False

_state = threading.local()


def set_default_dtype(float_width):
    """
    Select the float width used for every new tensor.

    Args:
        float_width (int): 64 or 32
    """
    global _DEFAULT_DTYPE
    if float_width == 64:
        _DEFAULT_DTYPE = np.float64
    elif float_width == 32:
        _DEFAULT_DTYPE = np.float32
    else:
        raise ValueError(f"float width must be 32 or 64, got {float_width}")


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_debug_checks(enabled):
    """Turn the finite-output check after every op on or off."""
    global DEBUG_CHECKS
    DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A dense float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        array = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if not array.flags.c_contiguous:
            array = array.copy(order="C")
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, grad):
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


class _Node:
    __slots__ = ("op", "output", "inputs", "backward")

    def __init__(self, op, output, inputs, backward):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """
    Ordered record of the differentiable operations of one forward pass.

    A tape belongs to the thread that entered it. After backward() has run,
    the tape refuses further use until reset() is called.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._outer = None

    def record(self, op, output, inputs, backward_fn):
        if self.consumed:
            raise TapeError("cannot record on a tape after backward; call reset() first")
        self.nodes.append(_Node(op, output, tuple(inputs), backward_fn))

    def reset(self):
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._outer = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = self._outer
        self._outer = None
        return False


def active_tape():
    return getattr(_state, "tape", None)


def make_op(op, data, inputs, backward_fn):
    data = np.asarray(data)
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced a non-finite value")
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, out, inputs, backward_fn)
    return out


def backward(loss, tape):
    """
    Populate gradients of every tensor on the tape with respect to loss.

    Gradients are accumulated additively, so a tensor used several times
    receives the sum of its contributions.

    Args:
        loss (Tensor): scalar output of the recorded forward pass
        tape (Tape): the tape that recorded it

    Raises:
        TapeError: if the loss is not scalar or the tape was already replayed
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; call reset() first")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(out_grad)):
            if grad is not None and tensor.requires_grad:
                tensor.accumulate_grad(grad)
    tape.consumed = True


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _leading_broadcast_shape(shape_a, shape_b):
    if shape_a == shape_b:
        return shape_a
    longer, shorter = (shape_a, shape_b) if len(shape_a) >= len(shape_b) else (shape_b, shape_a)
    core = tuple(shorter)
    while core and core[0] == 1:
        core = core[1:]
    if not core or tuple(longer[len(longer) - len(core):]) == core:
        return tuple(longer)
    raise ShapeError(f"shapes {shape_a} and {shape_b} are not broadcastable by leading-1 expansion")


def _sum_to_shape(grad, shape):
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    """
    Elementwise sum with leading-1 broadcasting.

    Raises:
        ShapeError: if the shapes cannot be expanded to each other
    """
    _leading_broadcast_shape(a.shape, b.shape)

    def _backward(grad):
        return _sum_to_shape(grad, a.shape), _sum_to_shape(grad, b.shape)

    return make_op("add", a.data + b.data, (a, b), _backward)


def relu(x):
    mask = x.data > 0

    def _backward(grad):
        return (grad * mask,)

    return make_op("relu", np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), _backward)


def _stable_sigmoid(values):
    z = np.exp(-np.abs(values))
    return np.where(values >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x):
    """Logistic function, evaluated without overflow for large |x|."""
    out_data = _stable_sigmoid(x.data)

    def _backward(grad):
        return (grad * out_data * (1.0 - out_data),)

    return make_op("sigmoid", out_data, (x,), _backward)


def elementwise(kind, a, b=None):
    """
    Dispatch to relu, sigmoid or add by name.

    Args:
        kind (str): "relu", "sigmoid" or "add"
        a (Tensor): first operand
        b (Tensor, optional): second operand, required for "add"
    """
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "add":
        if b is None:
            raise ShapeError("add needs two operands")
        return add(a, b)
    raise ValueError(f"unknown elementwise op '{kind}'")


def reduce_sum(x):
    def _backward(grad):
        return (np.broadcast_to(grad, x.shape),)

    return make_op("sum", np.sum(x.data), (x,), _backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b, transpose_b=False):
    """
    Matrix product a @ b (or a @ b.T), with a a vector or a 2D batch.

    Raises:
        ShapeError: if the inner dimensions differ
    """
    if a.ndim not in (1, 2) or b.ndim != 2:
        raise ShapeError(f"matmul expects a 1D/2D left and 2D right operand, got {a.shape} and {b.shape}")
    right = b.data.T if transpose_b else b.data
    if a.shape[-1] != right.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {right.shape}")

    def _backward(grad):
        left2d = a.data.reshape(-1, a.shape[-1])
        grad2d = grad.reshape(-1, right.shape[1])
        d_a = (grad2d @ right.T).reshape(a.shape)
        d_right = left2d.T @ grad2d
        return d_a, (d_right.T if transpose_b else d_right)

    return make_op("matmul", a.data @ right, (a, b), _backward)


def affine(x, weight, bias):
    """
    Compute x W + b.

    Args:
        x (Tensor): [n] or [batch, n]
        weight (Tensor): [n, p]
        bias (Tensor): [p]

    Returns:
        Tensor: [p] or [batch, p]
    """
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight columns {weight.shape[1]}")
    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------------------
# Structural
# ---------------------------------------------------------------------------

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) into {shape}")

    def _backward(grad):
        return (grad.reshape(x.shape),)

    return make_op("reshape", x.data.reshape(shape), (x,), _backward)


def flatten(x, start_dim=0):
    """Row-major flatten of all axes from start_dim onward."""
    return reshape(x, x.shape[:start_dim] + (prod(x.shape[start_dim:]),))


def concat(tensors, axis=0):
    """
    Concatenate tensors along an axis.

    Raises:
        ShapeError: if the tensors disagree on any other axis
    """
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(grad):
        return tuple(np.split(grad, splits, axis=axis))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


def repeat(x, repeats, axis):
    """Repeat every slice of x along axis `repeats` times (np.repeat order)."""
    axis = axis % x.ndim

    def _backward(grad):
        split_shape = x.shape[:axis] + (x.shape[axis], repeats) + x.shape[axis + 1:]
        return (grad.reshape(split_shape).sum(axis=axis + 1),)

    return make_op("repeat", np.repeat(x.data, repeats, axis=axis), (x,), _backward)


def embedding_lookup(table, indices):
    """
    Gather rows of an embedding table.

    Args:
        table (Tensor): [rows, dim]
        indices (array-like of int): row ids

    Raises:
        ShapeError: if an index is outside [0, rows)
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table with {table.shape[0]} rows")

    def _backward(grad):
        d_table = np.zeros_like(table.data)
        np.add.at(d_table, indices, grad)
        return (d_table,)

    return make_op("embedding_lookup", table.data[indices], (table,), _backward)


def dropout(x, p, train, rng=None):
    """
    Inverted dropout: zero each element with probability p and scale the rest
    by 1/(1-p) in training; identity otherwise.

    Args:
        x (Tensor): input
        p (float): drop probability in [0, 1)
        train (bool): training flag
        rng (numpy.random.Generator, optional): source of the dropout mask
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def _backward(grad):
        return (grad * mask,)

    return make_op("dropout", x.data * mask, (x,), _backward)


def structural(kind, x, *args, **kwargs):
    """Dispatch to reshape, flatten, concat, embedding_lookup or dropout by name."""
    ops = {
        "reshape": reshape,
        "flatten": flatten,
        "concat": concat,
        "embedding_lookup": embedding_lookup,
        "dropout": dropout,
    }
    if kind not in ops:
        raise ValueError(f"unknown structural op '{kind}'")
    return ops[kind](x, *args, **kwargs)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """
    Batch normalization over every axis except the channel axis (axis 1).

    In training the batch statistics are used and the running buffers are
    updated in place; in evaluation the running buffers are used.

    Args:
        x (Tensor): [batch, channels] or [batch, channels, height, width]
        gamma (Tensor): [channels] scale
        beta (Tensor): [channels] shift
        running_mean (numpy.ndarray): [channels] buffer
        running_var (numpy.ndarray): [channels] buffer
        train (bool): training flag

    Raises:
        ShapeError: on mismatched shapes, or a training batch with a single
            value per channel
    """
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    g = gamma.data.reshape(view)

    if train:
        count = x.size // x.shape[1]
        if count < 2:
            raise ShapeError(f"batch_norm needs more than one value per channel in training, got input {x.shape}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mean.reshape(view)) * inv_std.reshape(view)
        unbiased = var * count / (count - 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def _backward(grad):
            d_hat = grad * g
            d_x = (inv_std.reshape(view) / count) * (
                count * d_hat
                - d_hat.sum(axis=axes).reshape(view)
                - x_hat * (d_hat * x_hat).sum(axis=axes).reshape(view)
            )
            return d_x, (grad * x_hat).sum(axis=axes), grad.sum(axis=axes)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        x_hat = (x.data - running_mean.reshape(view)) * inv_std.reshape(view)

        def _backward(grad):
            return grad * g * inv_std.reshape(view), (grad * x_hat).sum(axis=axes), grad.sum(axis=axes)

    out = x_hat * g + beta.data.reshape(view)
    return make_op("batch_norm", out, (x, gamma, beta), _backward)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _same_padding(kernel_size, rate):
    total = (kernel_size - 1) * rate
    return total // 2, total - total // 2


def _prepare_conv(x, filters, bias, rate, padding):
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv input must be [C, H, W] or [B, C, H, W], got {x.shape}")
    if filters.ndim != 4 or filters.shape[2] != filters.shape[3]:
        raise ShapeError(f"filters must be [F_out, F_in, k, k], got {filters.shape}")
    if int(rate) != rate or rate < 1:
        raise ShapeError(f"atrous rate must be a positive integer, got {rate}")
    if padding not in ("valid", "same"):
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    x4 = x.data if x.ndim == 4 else x.data[None]
    f_out, f_in, k, _ = filters.shape
    if x4.shape[1] != f_in:
        raise ShapeError(f"filters expect {f_in} input channels, input has {x4.shape[1]}")
    if bias.shape != (f_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f_out} filters")

    pad = _same_padding(k, rate) if padding == "same" else (0, 0)
    if pad != (0, 0):
        x4 = np.pad(x4, ((0, 0), (0, 0), pad, pad))
    extent = (k - 1) * rate + 1
    if extent > x4.shape[2] or extent > x4.shape[3]:
        raise ShapeError(
            f"effective kernel extent {extent} exceeds padded input {x4.shape[2]}x{x4.shape[3]}"
        )
    out_h = x4.shape[2] - (k - 1) * rate
    out_w = x4.shape[3] - (k - 1) * rate
    return x4, pad, k, out_h, out_w


def _dilated_columns(xp, k, rate, out_h, out_w):
    batch, channels = xp.shape[:2]
    cols = np.empty((batch, channels, k, k, out_h, out_w), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            top, left = ky * rate, kx * rate
            cols[:, :, ky, kx] = xp[:, :, top:top + out_h, left:left + out_w]
    return cols.reshape(batch, channels * k * k, out_h * out_w)


def _window_columns(xp, k, out_h, out_w):
    batch, channels = xp.shape[:2]
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(batch, channels * k * k, out_h * out_w)


def _conv_from_columns(op, x, filters, bias, cols, xp_shape, pad, k, rate, out_h, out_w):
    batch = xp_shape[0]
    f_out = filters.shape[0]
    wmat = filters.data.reshape(f_out, -1)
    out = np.matmul(wmat, cols)
    out += bias.data[None, :, None]
    out = out.reshape(batch, f_out, out_h, out_w)
    if x.ndim == 3:
        out = out[0]

    def _backward(grad):
        grad4 = grad.reshape(batch, f_out, out_h * out_w)
        d_filters = np.matmul(grad4, cols.transpose(0, 2, 1)).sum(axis=0).reshape(filters.shape)
        d_bias = grad4.sum(axis=(0, 2))
        d_cols = np.matmul(wmat.T, grad4).reshape(batch, xp_shape[1], k, k, out_h, out_w)
        d_xp = np.zeros(xp_shape, dtype=cols.dtype)
        for ky in range(k):
            for kx in range(k):
                top, left = ky * rate, kx * rate
                d_xp[:, :, top:top + out_h, left:left + out_w] += d_cols[:, :, ky, kx]
        d_x = d_xp[:, :, pad[0]:xp_shape[2] - pad[1], pad[0]:xp_shape[3] - pad[1]]
        return d_x.reshape(x.shape), d_filters, d_bias

    return make_op(op, out, (x, filters, bias), _backward)


def conv2d(x, filters, bias, padding="valid"):
    """
    Standard 2D cross-correlation (no kernel flip), stride 1.

    Args:
        x (Tensor): [F_in, H, W] or [B, F_in, H, W]
        filters (Tensor): [F_out, F_in, k, k]
        bias (Tensor): [F_out]
        padding (str): "valid" or "same" (zero padding, output keeps H x W)
    """
    xp, pad, k, out_h, out_w = _prepare_conv(x, filters, bias, 1, padding)
    cols = _window_columns(xp, k, out_h, out_w)
    return _conv_from_columns("conv2d", x, filters, bias, cols, xp.shape, pad, k, 1, out_h, out_w)


def conv2d_dilated(x, filters, bias, rate, padding="valid"):
    """
    Atrous 2D cross-correlation: the kernel samples its window with stride
    `rate` on both spatial axes, y[i, j] = sum_{a, b} x[i + rate*a, j + rate*b] w[a, b]
    for a, b in 0..k-1. Rate 1 is the standard convolution.

    Args:
        x (Tensor): [F_in, H, W] or [B, F_in, H, W]
        filters (Tensor): [F_out, F_in, k, k]
        bias (Tensor): [F_out]
        rate (int): atrous rate, >= 1
        padding (str): "valid" (H' = H - (k-1)*rate) or "same" (H' = H)

    Raises:
        ShapeError: on a channel mismatch or a kernel larger than the padded input
    """
    xp, pad, k, out_h, out_w = _prepare_conv(x, filters, bias, rate, padding)
    cols = _dilated_columns(xp, k, int(rate), out_h, out_w)
    return _conv_from_columns("conv2d_dilated", x, filters, bias, cols, xp.shape, pad, k, int(rate), out_h, out_w)
