"""Network assembly, parameter accounting and transfer-learning freezing."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, StateError
from .functional import softmax
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    DepthwiseSeparable,
    Dropout,
    GlobalAvgPool,
    ReLU,
    SoftmaxCrossEntropy,
)

DEFAULT_BLOCKS = ((32, 2), (64, 2), (128, 2), (256, 2))


@dataclass
class ArchConfig:
    """Architecture settings.

    ``block_specs`` lists ``(out_channels, stride)`` for each separable
    block. ``stem_channels = 0`` drops the stem convolution.
    """

    block_specs: tuple = DEFAULT_BLOCKS
    head_units: int = 2500
    dropout_rate: float = 0.5
    input_shape: tuple = (1, 224, 224)
    num_classes: int = 4
    stem_channels: int = 16
    stem_stride: int = 2
    kernel_size: int = 3
    bias_before_norm: bool = False
    seed: int = 0

    def validate(self):
        if not self.block_specs:
            raise ConfigError("at least one separable block is required")
        for out_c, stride in self.block_specs:
            if stride not in (1, 2):
                raise ConfigError(f"block stride must be 1 or 2, got {stride}")
            if out_c < 1:
                raise ConfigError(f"block channels must be >= 1, got {out_c}")
        if self.stem_stride not in (1, 2):
            raise ConfigError(f"stem stride must be 1 or 2, got {self.stem_stride}")
        if self.head_units < 1:
            raise ConfigError(f"head_units must be >= 1, got {self.head_units}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) with positive entries, got {self.input_shape}")


@dataclass
class FreezePolicy:
    """``mode`` is ``none``, ``feature_extractor`` or ``prefix_list``."""

    mode: str = "none"
    prefixes: tuple = ()

    def __post_init__(self):
        if self.mode not in ("none", "feature_extractor", "prefix_list"):
            raise ConfigError(f"unknown freeze mode {self.mode!r}")


@dataclass
class FreezeReport:
    frozen: int
    warnings: list = field(default_factory=list)


class ModelGraph:
    """Ordered layer stack with a name-keyed parameter registry.

    Layer names are stable, so parameter names such as ``block2.pw.weight``
    survive save/load. Dropout masks come from a generator seeded with the
    architecture seed; :meth:`reseed` resets it.
    """

    def __init__(self, layers, input_shape, num_classes, seed=0, dtype=T.DEFAULT_DTYPE):
        self.layers = list(layers)  # (name, Layer)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.buffers = {}
        self.shape_plan = []
        self._tape = None
        init_rng = np.random.default_rng(seed)
        for name, layer in self.layers:
            layer.init_params(init_rng, self.dtype)
            for local, p in layer.params.items():
                p.name = f"{name}.{local}"
                if p.name in self.params:
                    raise ConfigError(f"duplicate parameter name {p.name}")
                self.params[p.name] = p
            for local, b in layer.buffers.items():
                self.buffers[f"{name}.{local}"] = b
        self.reseed(seed)
        self.check_shapes()

    # -- structure

    def check_shapes(self):
        shape = self.input_shape
        plan = []
        for name, layer in self.layers:
            if layer.kind == "softmax_xent":
                if shape != (self.num_classes,):
                    raise ShapeError(f"loss expects ({self.num_classes},) logits, got {shape}")
                continue
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"{name}: {exc}") from exc
            plan.append((name, layer.kind, shape))
        self.shape_plan = plan
        return plan

    def gap_index(self):
        for i, (_, layer) in enumerate(self.layers):
            if layer.kind == "global_avg_pool":
                return i
        return None

    def head_layer_names(self):
        gap = self.gap_index()
        return [] if gap is None else [n for n, _ in self.layers[gap + 1 :]]

    def head_param_names(self):
        heads = set(self.head_layer_names())
        return [n for n in self.params if n.split(".", 1)[0] in heads]

    def backbone_param_names(self):
        head = set(self.head_param_names())
        return [n for n in self.params if n not in head]

    def trainable_params(self):
        return [p for p in self.params.values() if not p.frozen]

    def reseed(self, seed):
        self._rng = np.random.default_rng(seed)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- computation

    def forward(self, x, training=False):
        """Logits for a batch (numpy array or Tensor, N x C x H x W)."""
        x = T.as_tensor(x, dtype=self.dtype)
        if x.data.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected batch of shape N x {self.input_shape}, got {x.shape}")
        for _, layer in self.layers:
            if layer.kind == "softmax_xent":
                break
            seed = int(self._rng.integers(2**63)) if (training and layer.kind == "dropout") else 0
            x = layer.forward(x, training, seed)
        return x

    def loss(self, x, labels, training=True):
        """Forward pass through the loss node. Returns ``(loss, probabilities)``."""
        logits = self.forward(x, training)
        loss, probs = T.softmax_cross_entropy(logits, labels)
        self._tape = loss
        return loss, probs

    def backward(self):
        if self._tape is None:
            raise StateError("backward requires a preceding forward pass through loss()")
        T.backward(self._tape)
        self._tape = None

    def state_arrays(self):
        """Name -> array for every parameter and buffer, in layer order."""
        out = {n: p.data for n, p in self.params.items()}
        out.update(self.buffers)
        return out


def build_model(config: ArchConfig = None, dtype=T.DEFAULT_DTYPE) -> ModelGraph:
    """Backbone of separable blocks, then GAP -> dense -> BN -> dropout -> dense -> loss."""
    config = config or ArchConfig()
    config.validate()
    k = config.kernel_size
    bias = config.bias_before_norm
    c_in, h, w = config.input_shape
    layers = []
    if config.stem_channels:
        layers += [
            ("stem", Conv2d(c_in, config.stem_channels, k, config.stem_stride, k // 2, bias=bias)),
            ("stem_bn", BatchNorm(config.stem_channels)),
            ("stem_relu", ReLU()),
        ]
        c_in = config.stem_channels
    for i, (c_out, stride) in enumerate(config.block_specs, start=1):
        layers += [
            (f"block{i}", DepthwiseSeparable(c_in, c_out, k, stride, k // 2, bias=bias, inner_norm=True)),
            (f"block{i}_bn", BatchNorm(c_out)),
            (f"block{i}_relu", ReLU()),
        ]
        c_in = c_out
    layers += [
        ("gap", GlobalAvgPool()),
        ("head_dense", Dense(c_in, config.head_units, bias=bias)),
        ("head_bn", BatchNorm(config.head_units)),
        ("head_dropout", Dropout(config.dropout_rate)),
        ("classifier", Dense(config.head_units, config.num_classes)),
        ("loss", SoftmaxCrossEntropy()),
    ]
    _check_stride_plan(config)
    return ModelGraph(layers, config.input_shape, config.num_classes, config.seed, dtype)


def _check_stride_plan(config):
    strides = ([config.stem_stride] if config.stem_channels else []) + [s for _, s in config.block_specs]
    h, w = config.input_shape[1:]
    for i, s in enumerate(strides):
        if s > 1 and (h < s or w < s):
            raise ConfigError(
                f"stride plan collapses the feature map: stage {i} sees {h}x{w} and needs stride {s}"
            )
        h, w = (h - 1) // s + 1, (w - 1) // s + 1


def forward_infer(graph: ModelGraph, batch) -> np.ndarray:
    """Class probabilities with dropout off and batch norm on running stats."""
    with T.no_grad():
        logits = graph.forward(batch, training=False)
    return softmax(logits.data.astype(np.float64))


# -- parameter accounting


def separable_param_count(c, o, k):
    return k * k * c + c * o


def full_conv_param_count(c, o, k):
    return k * k * c * o


def separable_reduction_ratio(c, o, k):
    return separable_param_count(c, o, k) / full_conv_param_count(c, o, k)


@dataclass
class ParamCount:
    per_layer: dict
    total: int
    trainable: int
    separable_blocks: dict  # name -> (separable weights, equivalent full conv weights)


def parameter_count(graph: ModelGraph) -> ParamCount:
    per_layer, blocks = {}, {}
    for name, layer in graph.layers:
        per_layer[name] = sum(p.data.size for p in layer.params.values())
        if layer.kind == "depthwise_separable":
            h = layer.hyper
            weights = layer.params["dw.weight"].data.size + layer.params["pw.weight"].data.size
            blocks[name] = (weights, full_conv_param_count(h["in_channels"], h["out_channels"], h["kernel_size"]))
    total = sum(per_layer.values())
    trainable = sum(p.data.size for p in graph.trainable_params())
    return ParamCount(per_layer, total, trainable, blocks)


# -- freezing


def apply_freeze_policy(graph: ModelGraph, policy: FreezePolicy) -> FreezeReport:
    for p in graph.params.values():
        p.frozen = False
    notes = []
    if policy.mode == "feature_extractor":
        if graph.gap_index() is None:
            notes.append("graph has no global pooling layer; nothing frozen")
        for name in graph.backbone_param_names():
            graph.params[name].frozen = True
    elif policy.mode == "prefix_list":
        for prefix in policy.prefixes:
            hits = [n for n in graph.params if n.startswith(prefix)]
            if not hits:
                notes.append(f"freeze prefix {prefix!r} matched no parameters")
            for n in hits:
                graph.params[n].frozen = True
    for note in notes:
        warnings.warn(note, stacklevel=2)
    frozen = sum(1 for p in graph.params.values() if p.frozen)
    return FreezeReport(frozen, notes)
