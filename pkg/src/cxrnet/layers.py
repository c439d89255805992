"""Layer nodes: parameter ownership, shape inference and forward wiring."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Param

KINDS = (
    "conv2d",
    "depthwise_separable",
    "batchnorm",
    "relu",
    "global_avg_pool",
    "dense",
    "dropout",
    "softmax_xent",
)


def fan_in_uniform(rng, shape, fan_in, dtype):
    """Uniform init in +-sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = None

    def __init__(self, **hyper):
        self.hyper = hyper
        self.params = {}
        self.buffers = {}

    def _param(self, local, data):
        self.params[local] = Param(local, data)
        return self.params[local]

    def init_params(self, rng, dtype):
        pass

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x, training=False, seed=0):
        raise NotImplementedError

    @property
    def frozen(self):
        return bool(self.params) and all(p.frozen for p in self.params.values())

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.hyper.items())
        return f"{type(self).__name__}({args})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None, bias=True):
        if padding is None:
            padding = kernel_size // 2
        if stride < 1 or padding < 0:
            raise ConfigError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
        super().__init__(in_channels=in_channels, out_channels=out_channels,
                         kernel_size=kernel_size, stride=stride, padding=padding, bias=bias)

    def init_params(self, rng, dtype):
        h = self.hyper
        k, c, o = h["kernel_size"], h["in_channels"], h["out_channels"]
        self._param("weight", fan_in_uniform(rng, (o, c, k, k), c * k * k, dtype))
        if h["bias"]:
            self._param("bias", np.zeros(o, dtype))

    def output_shape(self, in_shape):
        c, hgt, wid = in_shape
        h = self.hyper
        if c != h["in_channels"]:
            raise ShapeError(f"conv2d expects {h['in_channels']} channels, got {c}")
        args = h["kernel_size"], h["stride"], h["padding"]
        return (h["out_channels"], F.conv_output_size(hgt, *args), F.conv_output_size(wid, *args))

    def forward(self, x, training=False, seed=0):
        h = self.hyper
        return T.conv2d(x, self.params["weight"], self.params.get("bias"), h["stride"], h["padding"])


class BatchNorm(Layer):
    """Batch normalisation over channels (rank 4) or features (rank 2).

    A frozen layer always normalises with its running statistics and never
    updates them, so a frozen backbone is a fixed function of its input.
    """

    kind = "batchnorm"

    def __init__(self, num_features, eps=F.BN_EPS, momentum=F.BN_MOMENTUM):
        if eps <= 0:
            raise ConfigError(f"batch norm epsilon must be > 0, got {eps}")
        super().__init__(num_features=num_features, eps=eps, momentum=momentum)

    def init_params(self, rng, dtype):
        c = self.hyper["num_features"]
        self._param("gamma", np.ones(c, dtype))
        self._param("beta", np.zeros(c, dtype))
        self.buffers["running_mean"] = np.zeros(c, dtype)
        self.buffers["running_var"] = np.ones(c, dtype)

    def output_shape(self, in_shape):
        if in_shape[0] != self.hyper["num_features"]:
            raise ShapeError(f"batch norm expects {self.hyper['num_features']} channels, got {in_shape[0]}")
        return in_shape

    def forward(self, x, training=False, seed=0):
        h = self.hyper
        return T.batchnorm(x, self.params["gamma"], self.params["beta"],
                           self.buffers["running_mean"], self.buffers["running_var"],
                           training and not self.frozen, h["eps"], h["momentum"])


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, seed=0):
        return T.relu(x)


class DepthwiseSeparable(Layer):
    """Depthwise K x K convolution followed by a pointwise 1 x 1 convolution.

    With ``inner_norm`` the depthwise output passes through batch norm and
    ReLU before the pointwise stage.
    """

    kind = "depthwise_separable"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 bias=True, inner_norm=False, eps=F.BN_EPS, momentum=F.BN_MOMENTUM):
        if padding is None:
            padding = kernel_size // 2
        if stride < 1 or padding < 0:
            raise ConfigError(f"separable conv needs stride >= 1 and padding >= 0, got {stride}, {padding}")
        super().__init__(in_channels=in_channels, out_channels=out_channels,
                         kernel_size=kernel_size, stride=stride, padding=padding,
                         bias=bias, inner_norm=inner_norm)
        self.inner = BatchNorm(in_channels, eps, momentum) if inner_norm else None

    def init_params(self, rng, dtype):
        h = self.hyper
        k, c, o = h["kernel_size"], h["in_channels"], h["out_channels"]
        self._param("dw.weight", fan_in_uniform(rng, (c, k, k), k * k, dtype))
        if h["bias"]:
            self._param("dw.bias", np.zeros(c, dtype))
        if self.inner is not None:
            self.inner.init_params(rng, dtype)
            for name, p in self.inner.params.items():
                self.params[f"dw_bn.{name}"] = p
            for name, b in self.inner.buffers.items():
                self.buffers[f"dw_bn.{name}"] = b
        self._param("pw.weight", fan_in_uniform(rng, (o, c), c, dtype))
        if h["bias"]:
            self._param("pw.bias", np.zeros(o, dtype))

    def output_shape(self, in_shape):
        c, hgt, wid = in_shape
        h = self.hyper
        if c != h["in_channels"]:
            raise ShapeError(f"separable conv expects {h['in_channels']} channels, got {c}")
        args = h["kernel_size"], h["stride"], h["padding"]
        return (h["out_channels"], F.conv_output_size(hgt, *args), F.conv_output_size(wid, *args))

    def forward(self, x, training=False, seed=0):
        h, p = self.hyper, self.params
        y = T.depthwise_conv2d(x, p["dw.weight"], p.get("dw.bias"), h["stride"], h["padding"])
        if self.inner is not None:
            y = T.relu(self.inner.forward(y, training))
        return T.pointwise_conv2d(y, p["pw.weight"], p.get("pw.bias"))


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"global average pooling needs a C x H x W input, got {in_shape}")
        return (in_shape[0],)

    def forward(self, x, training=False, seed=0):
        return T.global_avg_pool(x)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, units, bias=True):
        super().__init__(in_features=in_features, units=units, bias=bias)

    def init_params(self, rng, dtype):
        h = self.hyper
        self._param("weight", fan_in_uniform(rng, (h["units"], h["in_features"]), h["in_features"], dtype))
        if h["bias"]:
            self._param("bias", np.zeros(h["units"], dtype))

    def output_shape(self, in_shape):
        if in_shape != (self.hyper["in_features"],):
            raise ShapeError(f"dense expects ({self.hyper['in_features']},) features, got {in_shape}")
        return (self.hyper["units"],)

    def forward(self, x, training=False, seed=0):
        return T.dense(x, self.params["weight"], self.params.get("bias"))


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate=0.5):
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        super().__init__(rate=rate)

    def forward(self, x, training=False, seed=0):
        return T.dropout(x, self.hyper["rate"], training, seed)


class SoftmaxCrossEntropy(Layer):
    kind = "softmax_xent"

    def forward(self, x, training=False, seed=0):
        raise TypeError("softmax_xent is a loss node; call ModelGraph.loss instead")
