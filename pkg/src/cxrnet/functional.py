"""Array-level forward and backward kernels for every layer kind.

All functions take and return plain numpy arrays. Images are NCHW,
convolution is cross-correlation (no kernel flip). The autograd layer in
:mod:`cxrnet.tensor` wraps these kernels; the naive loop versions at the
bottom of the module are kept as oracles for the vectorised paths.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")
    if size + 2 * padding < kernel:
        raise ShapeError(
            f"padded input size {size}+2*{padding} is smaller than kernel {kernel}"
        )
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp, k, stride, out_h, out_w):
    # N, C, H', W', K, K view into the padded input
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]


def _check_image(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------- conv2d


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    """Standard 2-D convolution. ``kernel`` is O x C x K x K, ``bias`` O or None."""
    _check_image(x)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be O x C x K x K, got {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, k, _ = kernel.shape
    if kc != c:
        raise ShapeError(f"input has {c} channels but kernel expects {kc}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    win = _windows(_pad(x, padding), k, stride, oh, ow)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # N, H', W', O
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(dout, x, kernel, stride=1, padding=0):
    """Gradients (dx, dkernel, dbias) of :func:`conv2d_forward`."""
    k = kernel.shape[2]
    oh, ow = dout.shape[2:]
    xp = _pad(x, padding)
    win = _windows(xp, k, stride, oh, ow)
    dkernel = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    dbias = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, kernel[:, :, i, j], axes=([1], [0]))  # N, H', W', C
            dxp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
    return np.ascontiguousarray(dx), dkernel, dbias


# ------------------------------------------------------- depthwise / pointwise


def depthwise_forward(x, kernel, bias, stride=1, padding=0):
    """Per-channel spatial convolution. ``kernel`` is C x K x K."""
    _check_image(x)
    n, c, h, w = x.shape
    if kernel.ndim != 3 or kernel.shape[0] != c or kernel.shape[1] != kernel.shape[2]:
        raise ShapeError(f"depthwise kernel must be {c} x K x K, got {kernel.shape}")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"depthwise bias shape {bias.shape} does not match {c} channels")
    k = kernel.shape[1]
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    win = _windows(_pad(x, padding), k, stride, oh, ow)
    out = np.einsum("nchwij,cij->nchw", win, kernel)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def depthwise_backward(dout, x, kernel, stride=1, padding=0):
    k = kernel.shape[1]
    oh, ow = dout.shape[2:]
    xp = _pad(x, padding)
    win = _windows(xp, k, stride, oh, ow)
    dkernel = np.einsum("nchw,nchwij->cij", dout, win)
    dbias = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                dout * kernel[None, :, i, j, None, None]
            )
    dx = dxp[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
    return np.ascontiguousarray(dx), dkernel, dbias


def pointwise_forward(x, kernel, bias):
    """1x1 channel-mixing convolution. ``kernel`` is O x C."""
    _check_image(x)
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"pointwise kernel must be O x {x.shape[1]}, got {kernel.shape}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"pointwise bias shape {bias.shape} does not match {kernel.shape[0]}")
    out = np.tensordot(kernel, x, axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def pointwise_backward(dout, x, kernel):
    dx = np.tensordot(kernel, dout, axes=([0], [1])).transpose(1, 0, 2, 3)
    dkernel = np.tensordot(dout, x, axes=([0, 2, 3], [0, 2, 3]))
    dbias = dout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dkernel, dbias


def depthwise_separable_forward(x, depthwise_kernel, pointwise_kernel,
                                depthwise_bias=None, pointwise_bias=None,
                                stride=1, padding=0):
    """Depthwise convolution followed by pointwise mixing."""
    mid = depthwise_forward(x, depthwise_kernel, depthwise_bias, stride, padding)
    return pointwise_forward(mid, pointwise_kernel, pointwise_bias)


def compose_separable_kernel(depthwise_kernel, pointwise_kernel):
    """Full O x C x K x K kernel equivalent to a bias-free separable pair."""
    return pointwise_kernel[:, :, None, None] * depthwise_kernel[None, :, :, :]


# ------------------------------------------------------------ batch norm


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batch norm expects rank 2 or 4 input, got shape {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean=None, running_var=None,
                      training=True, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running arrays,
    when given, are updated in place as ``momentum * old + (1 - momentum) * new``.
    Returns ``(out, cache)``; the cache feeds :func:`batchnorm_backward`.
    """
    if eps <= 0:
        raise ConfigError(f"batch norm epsilon must be > 0, got {eps}")
    axes, bshape = _bn_axes(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c}")
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
        if running_var is not None:
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        if running_mean is None or running_var is None:
            raise StateError("batch norm inference needs populated running statistics")
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    cache = (xhat, inv_std, training)
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(dout, gamma, cache):
    xhat, inv_std, training = cache
    axes, bshape = _bn_axes(dout)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(bshape)
    if not training:
        return dxhat * inv_std.reshape(bshape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, dgamma, dbeta


# ----------------------------------------------------- simple elementwise


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def global_average_pool(x):
    _check_image(x)
    return x.mean(axis=(2, 3))


def global_average_pool_backward(dout, in_shape):
    h, w = in_shape[2:]
    return np.broadcast_to(dout[:, :, None, None] / (h * w), in_shape).copy()


def dropout_forward(x, rate, training=True, seed=0):
    """Inverted dropout. Returns ``(out, kept_mask)``."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, np.ones(x.shape, dtype=bool)
    rng = np.random.default_rng(seed)
    mask = rng.random(x.shape) >= rate
    return x * mask / (1 - rate), mask


def dropout_backward(dout, mask, rate):
    if rate == 0:
        return dout
    return dout * mask / (1 - rate)


def dense_forward(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``x`` N x F and ``weight`` U x F."""
    if x.ndim != 2:
        raise ShapeError(f"dense input must be N x F, got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"dense weight {weight.shape} does not accept {x.shape[1]} features")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense bias {bias.shape} does not match {weight.shape[0]} units")
        out = out + bias
    return out


def dense_backward(dout, x, weight):
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy. Returns ``(loss, probabilities)``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N x K, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(n), labels].mean()
    return float(loss), np.exp(log_probs)


def softmax_cross_entropy_backward(probs, labels):
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    return grad / n


# ------------------------------------------------------------- oracles


def conv2d_naive(x, kernel, bias, stride=1, padding=0):
    """Direct loop convolution, used only as a reference."""
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    xp = _pad(x.astype(np.float64), padding)
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0 if bias is None else float(bias[oc])
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, ic, y * stride + i, xx * stride + j] * kernel[oc, ic, i, j]
                    out[b, oc, y, xx] = acc
    return out
