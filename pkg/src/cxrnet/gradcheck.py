"""Central finite-difference gradient checks (double precision)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import StateError

STEP = 1e-5


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)
    checked: int = 0
    kinks_skipped: int = 0

    def worst(self):
        return max(self.per_tensor.items(), key=lambda kv: kv[1]) if self.per_tensor else (None, 0.0)


def _evaluate(loss_fn):
    with T.record_relu_masks() as masks:
        value = float(loss_fn().data)
    return value, masks


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(loss_fn, tensors, names=None, step=STEP, max_elements=None, rng=None,
               kink_retries=3):
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` rebuilds the graph from the current contents of ``tensors``
    and returns a scalar Tensor. Each element is nudged by
    ``step * max(1, |x|)``. If either probe flips a relu's active set the
    difference quotient straddles a kink; the step is shrunk tenfold up to
    ``kink_retries`` times, and elements that still straddle one are counted
    in ``kinks_skipped`` instead of being scored.
    ``max_elements`` caps how many elements per tensor are probed.
    """
    for t in tensors:
        if np.finfo(t.data.dtype).eps > np.finfo(np.float64).eps:
            raise StateError("gradient checks run in double precision; got " + str(t.data.dtype))
        t.grad = None
    loss = loss_fn()
    T.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    names = names or [getattr(t, "name", None) or f"t{i}" for i, t in enumerate(tensors)]
    report = GradCheckReport(0.0)
    rng = rng or np.random.default_rng(0)
    with T.no_grad():
        _, base_pattern = _evaluate(loss_fn)
        for name, t, ga in zip(names, tensors, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = rng.choice(flat.size, max_elements, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                h = step * max(1.0, abs(orig))
                for _ in range(kink_retries + 1):
                    flat[i] = orig + h
                    fp, pat_p = _evaluate(loss_fn)
                    flat[i] = orig - h
                    fm, pat_m = _evaluate(loss_fn)
                    flat[i] = orig
                    smooth = _same_pattern(pat_p, base_pattern) and _same_pattern(pat_m, base_pattern)
                    if smooth:
                        break
                    h /= 10
                if not smooth:
                    report.kinks_skipped += 1
                    continue
                numeric = (fp - fm) / (2 * h)
                worst = max(worst, float(relative_error(ga.reshape(-1)[i], numeric)))
                report.checked += 1
            report.per_tensor[name] = worst
            report.max_rel_error = max(report.max_rel_error, worst)
    return report


def projection_loss(out, weights):
    """Scalar ``sum(out * weights)``; gives every output element its own weight."""
    return T.tensor_sum(T.mul(out, T.Tensor(weights)))


def check_layer(layer, input_shape, seed=0, training=True, check_input=True):
    """Grad-check a single layer on random double-precision data."""
    rng = np.random.default_rng(seed)
    if not layer.params and layer.kind not in ("relu", "global_avg_pool", "dropout"):
        layer.init_params(rng, np.float64)
    for p in layer.params.values():
        p.data = rng.standard_normal(p.shape) * 0.5 + (1.0 if p.name.endswith("gamma") else 0.0)
    for name, b in layer.buffers.items():
        b[...] = np.abs(rng.standard_normal(b.shape)) + (0.5 if name.endswith("var") else 0.0)
    x = T.Tensor(rng.standard_normal(input_shape), requires_grad=check_input, dtype=np.float64)
    if layer.kind == "relu":
        # keep inputs away from the kink
        x.data += np.sign(x.data) * 0.05
    probe = layer.forward(x, training, seed)
    weights = rng.standard_normal(probe.shape)
    tensors = list(layer.params.values()) + ([x] if check_input else [])
    names = [p.name for p in layer.params.values()] + (["input"] if check_input else [])

    def loss_fn():
        return projection_loss(layer.forward(x, training, seed), weights)

    return grad_check(loss_fn, tensors, names)


def check_model(graph, batch_size=8, seed=0, training=True, jitter=0.3):
    """Grad-check every trainable parameter of a double-precision graph.

    Batch-norm gammas and betas are first moved off their initial values
    (1 and 0) by ``jitter``-scaled noise. At beta = 0 a norm -> relu ->
    depthwise -> norm chain is exactly invariant to gamma, which would make
    those gradients zero and the comparison meaningless.
    """
    if np.finfo(graph.dtype).eps > np.finfo(np.float64).eps:
        raise StateError("build the graph with dtype=float64 for gradient checks")
    rng = np.random.default_rng(seed)
    for name, p in graph.params.items():
        if name.endswith((".gamma", ".beta")):
            p.data += jitter * rng.standard_normal(p.shape)
    x = rng.standard_normal((batch_size,) + graph.input_shape)
    labels = rng.integers(0, graph.num_classes, batch_size)
    params = graph.trainable_params()

    def loss_fn():
        graph.reseed(seed)
        loss, _ = graph.loss(x, labels, training=training)
        return loss

    return grad_check(loss_fn, params, [p.name for p in params])
