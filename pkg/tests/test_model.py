import warnings

import numpy as np
import pytest

from conftest import toy_config
from cxrnet.errors import ConfigError, ShapeError, StateError
from cxrnet.model import (
    ArchConfig,
    FreezePolicy,
    apply_freeze_policy,
    build_model,
    forward_infer,
    full_conv_param_count,
    parameter_count,
    separable_param_count,
    separable_reduction_ratio,
)
from cxrnet.trainer import AdamState, TrainConfig, adam_step


@pytest.fixture(scope="module")
def default_graph():
    return build_model(ArchConfig())


def test_default_model_logits(default_graph):
    x = np.random.default_rng(0).uniform(0, 1, (1, 1, 224, 224)).astype(np.float32)
    assert default_graph.forward(x).shape == (1, 4)


def test_default_head_dense_shape(default_graph):
    last = ArchConfig().block_specs[-1][0]
    assert default_graph.params["head_dense.weight"].shape == (2500, last)


def test_default_head_order(default_graph):
    gap = default_graph.gap_index()
    kinds = [layer.kind for _, layer in default_graph.layers[gap:]]
    assert kinds == ["global_avg_pool", "dense", "batchnorm", "dropout", "dense", "softmax_xent"]


def test_toy_shapes():
    cfg = ArchConfig(block_specs=((8, 2), (16, 2)), head_units=64, input_shape=(1, 32, 32))
    g = build_model(cfg)
    plan = dict((name, shape) for name, _, shape in g.shape_plan)
    assert plan["gap"] == (16,)
    assert plan["classifier"] == (4,)
    for n in (1, 16):
        assert g.forward(np.zeros((n, 1, 32, 32), np.float32)).shape == (n, 4)


def test_stride_plan_collapse():
    with pytest.raises(ConfigError):
        build_model(ArchConfig(block_specs=((8, 2),) * 6, input_shape=(1, 8, 8)))


def test_config_validation():
    with pytest.raises(ConfigError):
        build_model(ArchConfig(block_specs=((8, 3),)))
    with pytest.raises(ConfigError):
        build_model(ArchConfig(head_units=0))


def test_wrong_input_shape():
    g = build_model(toy_config())
    with pytest.raises(ShapeError):
        g.forward(np.zeros((2, 1, 15, 16), np.float32))


def test_forward_infer_properties():
    g = build_model(toy_config())
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (1, 1, 16, 16)).astype(np.float32)
    batch = np.concatenate([img, rng.uniform(0, 1, (2, 1, 16, 16)).astype(np.float32), img])
    p1 = forward_infer(g, batch)
    p2 = forward_infer(g, batch)
    assert np.all(np.abs(p1.sum(axis=1) - 1) < 1e-6)
    assert np.array_equal(p1[0], p1[3])
    assert p1.tobytes() == p2.tobytes()


def test_parameter_formulas():
    assert separable_param_count(32, 64, 3) == 288 + 2048 == 2336
    assert full_conv_param_count(32, 64, 3) == 18432
    assert separable_reduction_ratio(32, 64, 3) == pytest.approx(1 / 64 + 1 / 9, rel=1e-12)
    assert abs(separable_reduction_ratio(32, 64, 3) - 0.126736) < 1e-6
    for c, o in ((3, 5), (16, 16)):
        assert separable_param_count(c, o, 1) >= full_conv_param_count(c, o, 1)


def test_parameter_count_per_block():
    g = build_model(toy_config())
    counts = parameter_count(g)
    for name, layer in g.layers:
        if layer.kind == "depthwise_separable":
            h = layer.hyper
            sep, full = counts.separable_blocks[name]
            assert sep == separable_param_count(h["in_channels"], h["out_channels"], h["kernel_size"])
            assert full == full_conv_param_count(h["in_channels"], h["out_channels"], h["kernel_size"])
    assert counts.total == sum(p.data.size for p in g.params.values())


def test_head_dense_count_over_16_channels():
    from cxrnet.layers import Dense
    layer = Dense(16, 2500, bias=True)
    layer.init_params(np.random.default_rng(0), np.float32)
    assert layer.params["weight"].data.size == 40_000
    assert layer.params["bias"].data.size == 2500


def test_freeze_none():
    g = build_model(toy_config())
    assert apply_freeze_policy(g, FreezePolicy("none")).frozen == 0


def test_freeze_feature_extractor_totality(default_graph):
    rep = apply_freeze_policy(default_graph, FreezePolicy("feature_extractor"))
    frozen = {n for n, p in default_graph.params.items() if p.frozen}
    head = set(default_graph.head_param_names())
    assert frozen | head == set(default_graph.params)
    assert not frozen & head
    assert rep.frozen == len(frozen)
    assert {n.split(".")[0] for n in head} == {"head_dense", "head_bn", "classifier"}
    apply_freeze_policy(default_graph, FreezePolicy("none"))


def test_freeze_prefix_warns_on_unmatched():
    g = build_model(toy_config())
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = apply_freeze_policy(g, FreezePolicy("prefix_list", ("stem", "nothing_here")))
    assert rep.frozen == len([n for n in g.params if n.startswith("stem")])
    assert any("nothing_here" in str(w.message) for w in caught)


def test_frozen_tensors_survive_training_steps():
    g = build_model(toy_config(seed=4))
    apply_freeze_policy(g, FreezePolicy("feature_extractor"))
    before = {n: g.params[n].data.copy() for n in g.backbone_param_names()}
    head_before = {n: g.params[n].data.copy() for n in g.head_param_names()}
    rng = np.random.default_rng(0)
    state, cfg = AdamState(), TrainConfig()
    for _ in range(10):
        x = rng.uniform(0, 1, (8, 1, 16, 16)).astype(np.float32)
        g.zero_grad()
        g.loss(x, rng.integers(0, 4, 8))
        g.backward()
        adam_step(g.trainable_params(), state, cfg)
    for n, arr in before.items():
        assert g.params[n].data.tobytes() == arr.tobytes(), n
    assert any(not np.array_equal(g.params[n].data, a) for n, a in head_before.items())


def test_backward_needs_loss():
    g = build_model(toy_config())
    with pytest.raises(StateError):
        g.backward()


def test_init_is_seeded():
    a, b, c = build_model(toy_config(1)), build_model(toy_config(1)), build_model(toy_config(2))
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    assert not np.array_equal(a.params["stem.weight"].data, c.params["stem.weight"].data)


def test_fan_in_bound():
    g = build_model(toy_config())
    w = g.params["head_dense.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / w.shape[1])
