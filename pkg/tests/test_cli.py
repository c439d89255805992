import os
import re

import numpy as np
import pytest

from conftest import PUBLISHED_ORIGINALS, PUBLISHED_TARGETS, make_tree
from cxrnet import cli
from cxrnet.errors import NumericalError

TOY = ["--blocks", "8:2,16:2", "--stem-channels", "8", "--stem-stride", "1",
       "--head-units", "64", "--image-size", "16"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(root / "data"), "--n-train", "10", "--n-test", "5", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(synth):
    w = str(synth / "w.scw")
    assert cli.main(["train", "--manifest", str(synth / "data" / "manifest.tsv"), *TOY,
                     "--epochs", "3", "--out", w]) == 0
    return w


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# -- config handling


def test_defaults_echoed(capsys, synth, tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "fit", lambda *a, **k: [])
    code, _, err = run(capsys, "train", "--manifest", str(synth / "data" / "manifest.tsv"), *TOY,
                       "--out", str(tmp_path / "w.scw"))
    assert code == 0
    assert "lr = 0.001" in err
    assert "batch_size = 16" in err
    assert "epochs = 2000" in err


def test_config_file_and_override(capsys, synth, tmp_path, monkeypatch):
    seen = {}

    def fake_fit(graph, train, config, *a, **k):
        seen["config"] = config
        return []

    monkeypatch.setattr(cli, "fit", fake_fit)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy run\nlearning_rate = 0.01\nbatch_size = 4\nepochs = 7  # short\nhead_units = 32\n")
    code, _, err = run(capsys, "train", "--config", str(cfg), "--manifest", str(synth / "data" / "manifest.tsv"),
                       "--blocks", "8:2,16:2", "--stem-channels", "8", "--image-size", "16",
                       "--batch-size", "8", "--out", str(tmp_path / "w.scw"))
    assert code == 0
    assert seen["config"].learning_rate == 0.01
    assert seen["config"].batch_size == 8  # the flag wins
    assert seen["config"].epochs == 7
    assert "head_units = 32" in err


def test_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rat = 0.1\n")
    code, _, err = run(capsys, "train", "--config", str(cfg), "--manifest", "m.tsv")
    assert code == 2
    assert "learning_rat" in err


# -- prepare


@pytest.fixture(scope="module")
def published_root(tmp_path_factory):
    return make_tree(str(tmp_path_factory.mktemp("t1")), PUBLISHED_ORIGINALS, per_patient=1)


def test_prepare_published_counts_summary(capsys, published_root, tmp_path):
    targets = ",".join(str(PUBLISHED_TARGETS[k]) for k in PUBLISHED_ORIGINALS)
    code, out, _ = run(capsys, "prepare", "--data-root", published_root, "--test-fraction", "0",
                       "--targets", targets, "--out", str(tmp_path / "m.tsv"))
    assert code == 0
    assert re.search(r"covid19\s+254 → 6000\b", out)
    assert re.search(r"normal\s+4096 → 6096\b", out)
    assert os.path.exists(tmp_path / "m.tsv")


def test_prepare_targets_equal_originals(capsys, tmp_path):
    root = make_tree(str(tmp_path / "d"), {"normal": 8, "covid19": 4})
    code, out, _ = run(capsys, "prepare", "--data-root", root, "--test-fraction", "0.25",
                       "--target", "normal=6", "--target", "covid19=3", "--out", str(tmp_path / "m.tsv"))
    assert code == 0
    assert re.search(r"normal\s+6 → 6\s+2", out)
    assert re.search(r"covid19\s+3 → 3\s+1", out)


def test_prepare_target_below_originals(capsys, tmp_path):
    root = make_tree(str(tmp_path / "d"), {"normal": 8})
    code, _, err = run(capsys, "prepare", "--data-root", root, "--test-fraction", "0",
                       "--target", "normal=5", "--out", str(tmp_path / "m.tsv"))
    assert code == 2
    assert "normal" in err and "below" in err
    assert not os.path.exists(tmp_path / "m.tsv")


def test_prepare_missing_root(capsys, tmp_path):
    code, _, err = run(capsys, "prepare", "--data-root", str(tmp_path / "nope"), "--out", str(tmp_path / "m.tsv"))
    assert code == 3
    assert "nope" in err


# -- train


def test_train_writes_csv_rows(trained):
    lines = open(os.path.splitext(trained)[0] + ".csv").read().splitlines()
    assert lines[0] == "epoch,train_loss,train_accuracy,test_loss,test_accuracy"
    assert len(lines) == 4
    assert os.path.exists(trained + ".arch")


def test_train_deterministic_csv(synth, tmp_path):
    outs = []
    for i in range(2):
        w = str(tmp_path / f"w{i}.scw")
        assert cli.main(["train", "--manifest", str(synth / "data" / "manifest.tsv"), *TOY, "--epochs", "2",
                         "--seed", "5", "--out", w, "--log-csv", str(tmp_path / f"log{i}.csv")]) == 0
        outs.append(((tmp_path / f"log{i}.csv").read_bytes(), open(w, "rb").read()))
    assert outs[0] == outs[1]


def test_train_nan_exit_code(capsys, synth, tmp_path, monkeypatch):
    def diverge(*a, **k):
        raise NumericalError("epoch 2: non-finite training loss nan")

    monkeypatch.setattr(cli, "fit", diverge)
    code, _, err = run(capsys, "train", "--manifest", str(synth / "data" / "manifest.tsv"), *TOY,
                       "--out", str(tmp_path / "w.scw"))
    assert code == 4
    assert "epoch 2" in err


def test_train_missing_manifest(capsys, tmp_path):
    code, _, _ = run(capsys, "train", "--manifest", str(tmp_path / "none.tsv"), *TOY, "--epochs", "1")
    assert code == 3


# -- eval


def test_eval_outputs(capsys, synth, trained, tmp_path):
    out_dir = tmp_path / "report"
    code, out, _ = run(capsys, "eval", "--manifest", str(synth / "data" / "manifest.tsv"), "--weights", trained,
                       "--out", str(out_dir))
    assert code == 0
    assert "total=20" in out
    for name in ("confusion.tsv", "report.txt", "report.kv"):
        assert (out_dir / name).exists()
    code, out2, _ = run(capsys, "eval", "--verify-matrix", str(out_dir / "confusion.tsv"))
    assert code == 0 and out2 == out


def test_eval_published_matrix(capsys, published_matrix_path):
    code, out, _ = run(capsys, "eval", "--verify-matrix", published_matrix_path,
                       "--reference", "accuracy=95.58", "--reference", "sensitivity=97.52",
                       "--reference", "specificity=95.14")
    assert code == 0
    assert "accuracy=0.954918" in out
    assert out.count("NOT_REPRODUCED") == 3


def test_eval_architecture_mismatch(capsys, synth, trained):
    code, _, err = run(capsys, "eval", "--manifest", str(synth / "data" / "manifest.tsv"), "--weights", trained,
                       "--head-units", "32")
    assert code == 2
    assert "head_dense.weight" in err


def test_eval_corrupt_weights(capsys, synth, tmp_path, trained):
    bad = tmp_path / "bad.scw"
    bad.write_bytes(open(trained, "rb").read()[:100])
    os.link(trained + ".arch", str(bad) + ".arch")
    code, _, err = run(capsys, "eval", "--manifest", str(synth / "data" / "manifest.tsv"), "--weights", str(bad))
    assert code == 3


# -- predict


def test_predict_lines(capsys, synth, trained):
    img = str(synth / "data" / "covid19" / "a1p0000_0.pgm")
    other = str(synth / "data" / "normal" / "a0p0003_0.pgm")
    code, out, _ = run(capsys, "predict", "--weights", trained, "--image", img, other, img)
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 3 and lines[0] == lines[2]
    for line in lines:
        path, cls, *probs = line.split("\t")
        vals = [float(p) for p in probs]
        assert len(vals) == 4
        assert all(re.fullmatch(r"\d\.\d{6}", p) for p in probs)
        assert abs(sum(vals) - 1) <= 1e-6
        assert cli.LABELS[int(np.argmax(vals))] == cls


def test_predict_bad_image(capsys, synth, trained, tmp_path):
    bad = tmp_path / "junk.png"
    bad.write_bytes(b"junk")
    good = str(synth / "data" / "covid19" / "a1p0000_0.pgm")
    code, out, err = run(capsys, "predict", "--weights", trained, "--image", str(bad), good)
    assert code != 0
    assert "junk.png" in err
    assert len(out.splitlines()) == 1


def test_format_probs_sums_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = rng.dirichlet(np.ones(4) * 0.3)
        printed = cli.format_probs(p)
        assert sum(int(s.replace(".", "")) for s in printed) == 10**6
        assert all(abs(float(s) - v) < 1.01e-6 for s, v in zip(printed, p))


# -- plot


def write_log(path, rows):
    text = "epoch,train_loss,train_accuracy,test_loss,test_accuracy\n" + "".join(r + "\n" for r in rows)
    path.write_text(text)


def test_plot_structure_and_determinism(capsys, tmp_path):
    log = tmp_path / "log.csv"
    write_log(log, ["1,1.3,0.4,1.2,0.45", "2,0.9,0.6,1.0,0.55", "3,0.5,0.8,0.8,0.7"])
    outputs = []
    for tag in "ab":
        acc, loss = tmp_path / f"acc_{tag}.svg", tmp_path / f"loss_{tag}.svg"
        assert cli.main(["plot", "--log", str(log), "--out", str(acc), str(loss)]) == 0
        outputs.append((acc.read_bytes(), loss.read_bytes()))
    assert outputs[0] == outputs[1]
    for svg in outputs[0]:
        text = svg.decode()
        polylines = re.findall(r'<polyline data-series="(\w+)"[^>]*points="([^"]*)"', text)
        assert [name for name, _ in polylines] == ["train", "test"]
        assert all(len(points.split()) == 3 for _, points in polylines)
        assert "epoch" in text and "legend" in text
    assert "accuracy" in outputs[0][0].decode() and "loss" in outputs[0][1].decode()


def test_plot_header_only(capsys, tmp_path):
    log = tmp_path / "log.csv"
    write_log(log, [])
    code, _, _ = run(capsys, "plot", "--log", str(log), "--out", str(tmp_path / "a.svg"), str(tmp_path / "b.svg"))
    assert code == 2


def test_plot_malformed_row(capsys, tmp_path):
    log = tmp_path / "log.csv"
    write_log(log, ["1,1.3,0.4,1.2,0.45", "2,0.9,oops,1.0,0.55"])
    code, _, err = run(capsys, "plot", "--log", str(log), "--out", str(tmp_path / "a.svg"), str(tmp_path / "b.svg"))
    assert code == 2
    assert ":3:" in err
