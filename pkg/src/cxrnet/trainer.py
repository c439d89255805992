"""ADAM optimisation, epoch loop and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericalError, StateError
from .metrics import build_confusion


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 16
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("ADAM betas must lie strictly between 0 and 1")
        if self.eps <= 0:
            raise ConfigError("ADAM eps must be > 0")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float = math.nan
    test_accuracy: float = math.nan


def adam_step(params, state: AdamState, config: TrainConfig):
    """One bias-corrected ADAM update of every non-frozen parameter in ``params``."""
    live = [p for p in params if not p.frozen]
    if any(p.grad is None for p in live):
        missing = next(p.name for p in live if p.grad is None)
        raise StateError(f"no gradient for {missing}; run backward before stepping")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1 - b1 ** state.t
    bc2 = 1 - b2 ** state.t
    for p in live:
        g = p.grad
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        m, v = state.m[p.name], state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


class ArrayDataset:
    """In-memory images and labels with seeded per-epoch batching."""

    def __init__(self, x, y):
        self.x = np.asarray(x)
        self.y = np.asarray(y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ConfigError("images and labels differ in length")

    def __len__(self):
        return len(self.y)

    def batches(self, batch_size, seed=0, epoch=0, shuffle=True):
        order = np.arange(len(self.y))
        if shuffle:
            order = np.random.default_rng([seed, epoch]).permutation(len(self.y))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.x[idx], self.y[idx]


def train_epoch(graph, batches, state: AdamState, config: TrainConfig):
    """One optimisation pass. Returns ``(mean_loss, accuracy)`` over all samples."""
    total_loss, correct, seen = 0.0, 0, 0
    params = graph.trainable_params()
    for x, y in batches:
        graph.zero_grad()
        loss, probs = graph.loss(x, y, training=True)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite training loss {value}")
        graph.backward()
        adam_step(params, state, config)
        n = len(y)
        total_loss += value * n
        correct += int((probs.argmax(axis=1) == y).sum())
        seen += n
    if seen == 0:
        raise ConfigError("training set is empty")
    return total_loss / seen, correct / seen


def evaluate(graph, batches, class_names=None):
    """Inference-mode loss and confusion matrix; leaves the graph untouched."""
    total_loss, seen = 0.0, 0
    preds, actual = [], []
    with T.no_grad():
        for x, y in batches:
            logits = graph.forward(x, training=False)
            loss, probs = T.softmax_cross_entropy(logits, y)
            total_loss += float(loss.data) * len(y)
            seen += len(y)
            # argmax returns the first maximum: ties go to the lowest class index
            preds.append(probs.argmax(axis=1))
            actual.append(np.asarray(y))
    k = graph.num_classes
    p = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    a = np.concatenate(actual) if actual else np.zeros(0, np.int64)
    loss = total_loss / seen if seen else math.nan
    return loss, build_confusion(p, a, k, class_names)


def fit(graph, train_data, config: TrainConfig, test_data=None, on_epoch=None, class_names=None):
    """Run ``config.epochs`` epochs and return the list of :class:`EpochLog`.

    ``train_data``/``test_data`` expose ``batches(batch_size, seed, epoch, shuffle)``.
    """
    config.validate()
    graph.reseed(config.seed)
    state = AdamState()
    logs = []
    for epoch in range(1, config.epochs + 1):
        batches = train_data.batches(config.batch_size, config.seed, epoch, config.shuffle)
        try:
            loss, acc = train_epoch(graph, batches, state, config)
        except NumericalError as exc:
            raise NumericalError(f"epoch {epoch}: {exc}") from exc
        log = EpochLog(epoch, loss, acc)
        if test_data is not None:
            test_loss, matrix = evaluate(graph, test_data.batches(config.batch_size, shuffle=False), class_names)
            log.test_loss = test_loss
            log.test_accuracy = float(np.trace(matrix.counts)) / max(matrix.total, 1)
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
    return logs
