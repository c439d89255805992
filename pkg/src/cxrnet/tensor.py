"""Tensor type with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when any input requires a
gradient the op records a backward closure, and :func:`backward` replays
those closures in reverse topological order. Tensors are not mutated by
ops, so a finished forward pass can be read from several threads; the
tape itself belongs to the thread that built it.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import functional as F
from .errors import NumericalError, ShapeError, StateError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def _checked():
    return getattr(_state, "checked", False)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def checked():
    """Raise :class:`NumericalError` as soon as an op produces NaN or Inf."""
    prev = _checked()
    _state.checked = True
    try:
        yield
    finally:
        _state.checked = prev


@contextlib.contextmanager
def record_relu_masks():
    """Collect the active set of every relu evaluated inside the block."""
    prev = getattr(_state, "relu_log", None)
    log = []
    _state.relu_log = log
    try:
        yield log
    finally:
        _state.relu_log = prev


class Tensor:
    """Rank 0-4 array plus gradient storage.

    Rank 0 only appears for scalar losses.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.asarray(arr, dtype=dtype, order="C")
        if arr.ndim > 4:
            raise ShapeError(f"tensors have at most 4 dimensions, got shape {arr.shape}")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"every dimension must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tensor_sum(self)


class Param(Tensor):
    """Named trainable tensor. ``frozen`` params receive no gradient."""

    __slots__ = ("name",)

    def __init__(self, name, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    @property
    def frozen(self):
        return not self.requires_grad

    @frozen.setter
    def frozen(self, value):
        self.requires_grad = not value
        if value:
            self.grad = None

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if _checked() and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite values produced by {op}")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def backward(loss, seed=1.0):
    """Propagate gradients from ``loss`` into every tensor that requires one."""
    if loss._backward is None:
        raise StateError("backward called on a tensor with no recorded forward pass")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.full(loss.shape, seed, dtype=loss.dtype)
    for node in reversed(order):
        if node.grad is not None:
            node._backward(node.grad)


# ------------------------------------------------------------------- ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    return _result(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")

    def bw(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), bw, "mul")


def tensor_sum(a):
    def bw(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum()), (a,), bw, "sum")


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = F.conv2d_forward(x.data, kernel.data, None if bias is None else bias.data, stride, padding)

    def bw(g):
        dx, dk, db = F.conv2d_backward(g, x.data, kernel.data, stride, padding)
        x._accumulate(dx)
        kernel._accumulate(dk)
        if bias is not None:
            bias._accumulate(db)

    return _result(out, parents, bw, "conv2d")


def depthwise_conv2d(x, kernel, bias=None, stride=1, padding=0):
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = F.depthwise_forward(x.data, kernel.data, None if bias is None else bias.data, stride, padding)

    def bw(g):
        dx, dk, db = F.depthwise_backward(g, x.data, kernel.data, stride, padding)
        x._accumulate(dx)
        kernel._accumulate(dk)
        if bias is not None:
            bias._accumulate(db)

    return _result(out, parents, bw, "depthwise_conv2d")


def pointwise_conv2d(x, kernel, bias=None):
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = F.pointwise_forward(x.data, kernel.data, None if bias is None else bias.data)

    def bw(g):
        dx, dk, db = F.pointwise_backward(g, x.data, kernel.data)
        x._accumulate(dx)
        kernel._accumulate(dk)
        if bias is not None:
            bias._accumulate(db)

    return _result(out, parents, bw, "pointwise_conv2d")


def batchnorm(x, gamma, beta, running_mean=None, running_var=None, training=True,
              eps=F.BN_EPS, momentum=F.BN_MOMENTUM):
    out, cache = F.batchnorm_forward(x.data, gamma.data, beta.data, running_mean,
                                     running_var, training, eps, momentum)

    def bw(g):
        dx, dgamma, dbeta = F.batchnorm_backward(g, gamma.data, cache)
        x._accumulate(dx)
        gamma._accumulate(dgamma)
        beta._accumulate(dbeta)

    return _result(out, (x, gamma, beta), bw, "batchnorm")


def relu(x):
    log = getattr(_state, "relu_log", None)
    if log is not None:
        log.append(x.data > 0)

    def bw(g):
        x._accumulate(F.relu_backward(g, x.data))

    return _result(F.relu_forward(x.data), (x,), bw, "relu")


def global_avg_pool(x):
    def bw(g):
        x._accumulate(F.global_average_pool_backward(g, x.shape))

    return _result(F.global_average_pool(x.data), (x,), bw, "global_avg_pool")


def dense(x, weight, bias=None):
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = F.dense_forward(x.data, weight.data, None if bias is None else bias.data)

    def bw(g):
        dx, dw, db = F.dense_backward(g, x.data, weight.data)
        x._accumulate(dx)
        weight._accumulate(dw)
        if bias is not None:
            bias._accumulate(db)

    return _result(out, parents, bw, "dense")


def dropout(x, rate, training=True, seed=0):
    out, mask = F.dropout_forward(x.data, rate, training, seed)
    if out is x.data:
        out = out.copy()

    def bw(g):
        x._accumulate(F.dropout_backward(g, mask, rate) if training else g)

    return _result(out, (x,), bw, "dropout")


def softmax_cross_entropy(logits, labels):
    """Returns ``(loss_tensor, probabilities)``."""
    labels = np.asarray(labels, dtype=np.int64)
    loss, probs = F.softmax_cross_entropy(logits.data, labels)

    def bw(g):
        logits._accumulate(np.asarray(g).item() * F.softmax_cross_entropy_backward(probs, labels))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_xent"), probs
