import os
import struct
import zlib

import numpy as np
import pytest

from conftest import toy_config
from cxrnet.errors import CompletenessError, CorruptFileError, ShapeError
from cxrnet.model import build_model
from cxrnet.weights import decode_tensors, encode_tensors, load_weights, save_weights


def snapshot(graph):
    return {n: a.copy() for n, a in graph.state_arrays().items()}


def same(graph, snap):
    return all(graph.state_arrays()[n].tobytes() == a.tobytes() for n, a in snap.items())


def test_layout_matches_hand_encoding():
    a = np.arange(6, dtype=np.float32).reshape(2, 3) / 7
    b = np.array([1.5], np.float32)
    body = b"SCW1" + struct.pack("<II", 1, 2)
    for name, arr in (("layer.weight", a), ("é", b)):
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    assert encode_tensors({"layer.weight": a, "é": b}) == body
    out = decode_tensors(body)
    assert list(out) == ["layer.weight", "é"]
    assert out["layer.weight"].tobytes() == a.tobytes()


def test_round_trip_bit_exact(tmp_path):
    src = build_model(toy_config(seed=1))
    # give buffers non-default contents
    for b in src.buffers.values():
        b += np.float32(0.125)
    path = tmp_path / "w.scw"
    save_weights(src, path)
    dst = build_model(toy_config(seed=2))
    rep = load_weights(dst, path)
    assert not rep.missing and not rep.extra
    assert same(dst, snapshot(src))
    save_weights(dst, tmp_path / "again.scw")
    assert (tmp_path / "again.scw").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic", "trailing"])
def test_corrupt_file_leaves_graph_untouched(tmp_path, damage):
    path = tmp_path / "w.scw"
    save_weights(build_model(toy_config(seed=1)), path)
    blob = bytearray(path.read_bytes())
    if damage == "truncate":
        blob = blob[: len(blob) // 2]
    elif damage == "flip":
        blob[40] ^= 0xFF
    elif damage == "magic":
        blob[:4] = b"XXXX"
    else:
        blob += b"\0"
    path.write_bytes(bytes(blob))
    g = build_model(toy_config(seed=2))
    before = snapshot(g)
    with pytest.raises(CorruptFileError):
        load_weights(g, path)
    assert same(g, before)


def test_shape_conflict_names_tensor(tmp_path):
    path = tmp_path / "w.scw"
    save_weights(build_model(toy_config(head_units=32)), path)
    g = build_model(toy_config())
    before = snapshot(g)
    with pytest.raises(ShapeError, match="head_dense.weight"):
        load_weights(g, path)
    assert same(g, before)


def test_missing_tensor_requires_partial(tmp_path):
    src = build_model(toy_config(seed=1))
    head = set(src.head_param_names())
    backbone = [n for n in src.state_arrays() if n.split(".")[0] not in {h.split(".")[0] for h in head}]
    path = tmp_path / "backbone.scw"
    save_weights(src, path, names=backbone)
    g = build_model(toy_config(seed=5))
    before = snapshot(g)
    with pytest.raises(CompletenessError):
        load_weights(g, path)
    assert same(g, before)
    rep = load_weights(g, path, allow_partial=True)
    assert set(rep.missing) == head
    for n in backbone:
        assert g.state_arrays()[n].tobytes() == src.state_arrays()[n].tobytes()
    # head keeps its seeded initial values
    fresh = build_model(toy_config(seed=5))
    for n in head:
        assert np.array_equal(g.params[n].data, fresh.params[n].data)


def test_partial_subset_round_trip(tmp_path):
    src = build_model(toy_config(seed=1))
    path = tmp_path / "full.scw"
    save_weights(src, path)
    g = build_model(toy_config(seed=2))
    only = [n for n in g.state_arrays() if n.startswith("block1")]
    rep = load_weights(g, path, allow_partial=True, only=only)
    assert sorted(rep.loaded) == sorted(only)
    save_weights(g, tmp_path / "subset.scw", names=only)
    assert decode_tensors((tmp_path / "subset.scw").read_bytes()).keys() == set(only)
    for n, arr in decode_tensors((tmp_path / "subset.scw").read_bytes()).items():
        assert arr.tobytes() == src.state_arrays()[n].tobytes()


def test_save_is_atomic(tmp_path, monkeypatch):
    path = tmp_path / "w.scw"
    save_weights(build_model(toy_config(seed=1)), path)
    original = path.read_bytes()

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        save_weights(build_model(toy_config(seed=2)), path)
    assert path.read_bytes() == original
    assert sorted(os.listdir(tmp_path)) == ["w.scw"]
