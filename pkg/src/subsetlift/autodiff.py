"""A small dense reverse-mode differentiation engine on top of numpy.

Operations executed while at least one input requires a gradient are
appended to the thread's current :class:`Tape`. :func:`backward` walks that
tape in reverse recording order, which is a valid reverse topological order,
then frees it.

>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> y = (x * x).sum()
>>> backward(y)
>>> x.grad
array([2., 4.])
"""
import contextlib
import os
import threading

import numpy as np

from . import kernels, linalg
from ._accel import USE_NUMBA
from .errors import (
    DomainError,
    InvalidBatchError,
    InvalidInputError,
    InvalidShapeError,
    NumericFailureError,
)

DEBUG = os.environ.get("SUBSETLIFT_DEBUG", "").strip().lower() in ("1", "true", "yes", "on")

_local = threading.local()


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager to scope recording; outside any ``with`` block
    a per-thread default tape is used.
    """

    def __init__(self):
        self.nodes = []
        self._previous = None

    def __enter__(self):
        self._previous = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._previous
        return False

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        for node in self.nodes:
            node._backward = None
            node._parents = ()
            node._tape = None
        self.nodes = []


def current_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (for evaluation passes)."""
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_tape")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._tape = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out._tape = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if DEBUG and not np.all(np.isfinite(value)):
        raise NumericFailureError("non-finite value produced in forward pass")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape = current_tape()
        out._tape = tape
        tape.record(out)
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise InvalidShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    if np.any(b.value == 0.0):
        raise DomainError("division by zero")
    out = a.value / b.value

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.value, b.shape))

    return _make(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.value, (a,), backward)


def log(a):
    a = as_tensor(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log of a non-positive value")

    def backward(g):
        _accumulate(a, g / a.value)

    return _make(np.log(a.value), (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.value < 0.0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.value)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.where(out > 0.0, 0.5 / out, 0.0)
        _accumulate(a, g * local)

    return _make(out, (a,), backward)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.value, 0.0)

    def backward(g):
        _accumulate(a, g * (out > 0.0))

    return _make(out, (a,), backward)


def clamp_min(a, c):
    """``max(a, c)`` for a constant ``c``; gradient passes only where ``a > c``."""
    a = as_tensor(a)
    mask = a.value > c

    def backward(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.value, float(c)), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = a.value @ b.value
    except ValueError as exc:
        raise InvalidShapeError(str(exc)) from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _make(out, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis of ``x``.

    Equivalent to composing :func:`matmul`, :func:`transpose` and :func:`add`
    but flattens the leading axes into one GEMM for each of the forward and
    backward products.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise InvalidShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, weight.shape[1])
    out = x2 @ weight.value.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.value
        parents = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.value).reshape(x.shape))
        if weight.requires_grad:
            _accumulate(weight, g2.T @ x2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))

    return _make(out.reshape(lead + (weight.shape[0],)), parents, backward)


def singular_values(e):
    """Singular values of a matrix, descending.

    The backward rule ``dE = U diag(dL/dsigma) V^T`` ignores the singular
    vector sensitivities. That is exact for losses that are symmetric
    functions of the singular values, which is the only use here.
    """
    e = as_tensor(e)
    if e.ndim != 2:
        raise InvalidShapeError(f"singular_values expects a matrix, got shape {e.shape}")
    u, sigma, v = linalg.svd(e.value)

    def backward(g):
        _accumulate(e, (u * g) @ v.T)

    return _make(sigma, (e,), backward)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise InvalidShapeError("transpose needs at least 2 axes")

    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.value, -1, -2), (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise InvalidShapeError(str(exc)) from exc

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _make(out, tuple(tensors), backward)


def getitem(a, index):
    """Basic or advanced indexing; the adjoint scatters with ``np.add.at``."""
    a = as_tensor(a)
    try:
        out = a.value[index]
    except IndexError as exc:
        raise InvalidInputError(str(exc)) from exc

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(np.array(out, dtype=np.float64), (a,), backward)


def take(a, indices, axis):
    """Select entries along ``axis`` (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise InvalidInputError(f"index out of range for axis of size {n}")
    out = np.take(a.value, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.value)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        _accumulate(a, full)

    return _make(out, (a,), backward)


def gather_rows(a, indices):
    """Rows (second-to-last axis) of a matrix or stack of matrices."""
    return take(a, indices, axis=-2 if as_tensor(a).ndim >= 2 else 0)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def detach(a):
    """Same values, cut out of the graph."""
    a = as_tensor(a)
    return Tensor(a.value.copy())


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


class BatchNormState:
    """Learnable scale/shift plus running statistics for one feature axis."""

    def __init__(self, features, momentum=0.1, eps=1e-5):
        self.scale = Tensor(np.ones(features), requires_grad=True)
        self.shift = Tensor(np.zeros(features), requires_grad=True)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x, state, train=True):
    """Normalize the last axis using statistics over all leading axes.

    In train mode the batch mean and biased variance normalize the input and
    the running statistics are updated with the unbiased variance. Eval mode
    uses the running statistics.
    """
    x = as_tensor(x)
    features = x.shape[-1]
    flat = np.ascontiguousarray(x.value.reshape(-1, features))
    n = flat.shape[0]
    gamma = state.scale
    beta = state.shift
    if train:
        if n < 2:
            raise InvalidBatchError("batchnorm in train mode needs at least 2 rows")
        fwd = kernels.batchnorm_forward_numba if USE_NUMBA else kernels.batchnorm_forward_numpy
        out, xhat, mu, var, inv_std = fwd(flat, gamma.value, beta.value, state.eps)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var * (n / (n - 1))
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (flat - state.running_mean) * inv_std
        out = xhat * gamma.value + beta.value
    out = out.reshape(x.shape)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape(-1, features))
        if train:
            bwd = kernels.batchnorm_backward_numba if USE_NUMBA else kernels.batchnorm_backward_numpy
            dx, dgamma, dbeta = bwd(gf, xhat, gamma.value, inv_std)
        else:
            dgamma = np.sum(gf * xhat, axis=0)
            dbeta = gf.sum(axis=0)
            dx = gf * (gamma.value * inv_std)
        _accumulate(gamma, dgamma)
        _accumulate(beta, dbeta)
        _accumulate(x, dx.reshape(x.shape))

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad tensor.

    The tape that recorded ``loss`` is freed afterwards.
    """
    if not isinstance(loss, Tensor):
        raise InvalidInputError("backward expects a Tensor")
    if loss.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = loss._tape
    seed = np.ones_like(loss.value)
    if tape is None:
        _accumulate(loss, seed)
        return
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    tape.clear()
