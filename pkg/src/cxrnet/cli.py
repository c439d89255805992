"""Command-line entry point: ``cxrnet <command> [options]``.

Exit codes: 0 success, 2 configuration/validation error, 3 I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import metrics
from .datapipe import images
from .datapipe.batches import ManifestDataset
from .datapipe.manifest import LABELS, DatasetManifest, augment_plan, build_manifest, patient_split
from .datapipe.synthetic import write_dataset
from .errors import (
    CompletenessError,
    ConfigError,
    CorruptFileError,
    NumericalError,
    ShapeError,
)
from .io_utils import atomic_write_text
from .model import ArchConfig, FreezePolicy, apply_freeze_policy, build_model, forward_infer
from .plotting import line_chart
from .trainer import TrainConfig, fit
from .weights import load_weights, save_weights

log = logging.getLogger("cxrnet")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
CSV_HEADER = ["epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy"]
CONFIG_ALIASES = {"learning_rate": "lr", "batch": "batch_size", "block_specs": "blocks"}
ARCH_KEYS = ("blocks", "stem_channels", "stem_stride", "head_units", "dropout", "image_size", "kernel_size")


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# -- config handling


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            values[CONFIG_ALIASES.get(key, key)] = value
    return values


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise CliError(f"not a boolean: {text!r}")


def apply_config_defaults(parser, values):
    actions = {a.dest: a for a in parser._actions}
    for key, value in values.items():
        if key not in actions or key in ("config", "help"):
            raise CliError(f"unknown config key {key!r}")
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = _parse_bool(value)
        elif isinstance(action, argparse._AppendAction):
            value = [v.strip() for v in value.split(",") if v.strip()]
        elif action.type is not None:
            try:
                value = action.type(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CliError(f"config key {key}: {exc}") from exc
        parser.set_defaults(**{key: value})


def echo_settings(args):
    for key in sorted(vars(args)):
        if key in ("func", "config"):
            continue
        log.info("%s = %s", key, getattr(args, key))


def parse_blocks(text):
    try:
        specs = []
        for part in text.split(","):
            c, s = part.split(":")
            specs.append((int(c), int(s)))
        return tuple(specs)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"blocks must look like '8:2,16:2', got {text!r}") from exc


def arch_from_args(args, sidecar=None):
    values = dict(sidecar or {})
    for key in ARCH_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    defaults = ArchConfig()
    blocks = values.get("blocks", defaults.block_specs)
    if isinstance(blocks, str):
        blocks = parse_blocks(blocks)
    size = int(values.get("image_size", defaults.input_shape[1]))
    return ArchConfig(
        block_specs=tuple(blocks),
        head_units=int(values.get("head_units", defaults.head_units)),
        dropout_rate=float(values.get("dropout", defaults.dropout_rate)),
        input_shape=(1, size, size),
        num_classes=len(LABELS),
        stem_channels=int(values.get("stem_channels", defaults.stem_channels)),
        stem_stride=int(values.get("stem_stride", defaults.stem_stride)),
        kernel_size=int(values.get("kernel_size", defaults.kernel_size)),
        seed=int(getattr(args, "seed", 0) or 0),
    )


def arch_sidecar_text(arch: ArchConfig):
    blocks = ",".join(f"{c}:{s}" for c, s in arch.block_specs)
    lines = [
        f"blocks = {blocks}",
        f"stem_channels = {arch.stem_channels}",
        f"stem_stride = {arch.stem_stride}",
        f"head_units = {arch.head_units}",
        f"dropout = {arch.dropout_rate!r}",
        f"image_size = {arch.input_shape[1]}",
        f"kernel_size = {arch.kernel_size}",
        f"class_names = {','.join(LABELS)}",
    ]
    return "\n".join(lines) + "\n"


def read_sidecar(weights_path):
    path = weights_path + ".arch"
    return read_config_file(path) if os.path.exists(path) else None


def _add_arch_args(p, with_defaults):
    d = ArchConfig()
    p.add_argument("--blocks", type=parse_blocks,
                   default=d.block_specs if with_defaults else None,
                   help="separable blocks as out_channels:stride pairs, e.g. 8:2,16:2")
    p.add_argument("--stem-channels", type=int, default=d.stem_channels if with_defaults else None)
    p.add_argument("--stem-stride", type=int, default=d.stem_stride if with_defaults else None)
    p.add_argument("--head-units", type=int, default=d.head_units if with_defaults else None)
    p.add_argument("--dropout", type=float, default=d.dropout_rate if with_defaults else None)
    p.add_argument("--image-size", type=int, default=d.input_shape[1] if with_defaults else None)
    p.add_argument("--kernel-size", type=int, default=d.kernel_size if with_defaults else None)


def _manifest_dataset(manifest_path, split, image_size):
    manifest = DatasetManifest.load(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    return ManifestDataset(manifest.select(split), (image_size, image_size), root=root)


def _load_into(graph, path, allow_partial=False, only=None):
    try:
        return load_weights(graph, path, allow_partial=allow_partial, only=only)
    except ShapeError as exc:
        raise CliError(f"weights do not fit the architecture: {exc}") from exc
    except CompletenessError as exc:
        raise CliError(f"weights do not fit the architecture: {exc}") from exc
    except CorruptFileError as exc:
        raise CliError(f"{path}: corrupt weight file: {exc}", EXIT_IO) from exc


# -- commands


def cmd_synth(args):
    m = write_dataset(args.out, args.task, args.n_train, args.n_test, args.image_size, args.seed)
    print(f"wrote {len(m.records)} images and {os.path.join(args.out, 'manifest.tsv')}")


def parse_targets(args):
    targets = {}
    if args.targets:
        parts = [p.strip() for p in args.targets.split(",")]
        if len(parts) != len(LABELS):
            raise CliError(f"--targets needs {len(LABELS)} comma-separated counts ({', '.join(LABELS)})")
        for label, p in zip(LABELS, parts):
            targets[label] = int(p)
    for item in args.target or []:
        if "=" not in item:
            raise CliError(f"--target expects label=count, got {item!r}")
        label, count = item.split("=", 1)
        if label not in LABELS:
            raise CliError(f"--target: unknown label {label!r}")
        targets[label] = int(count)
    return targets


def format_summary(manifest):
    lines = [f"{'class':<22}{'train original':>15}   {'train after aug.':<17}{'test':>6}"]
    for label, orig, total, test in manifest.summary_rows():
        lines.append(f"{label:<22}{orig:>15} → {total:<17}{test:>6}")
    return "\n".join(lines) + "\n"


def cmd_prepare(args):
    if not os.path.isdir(args.data_root):
        raise CliError(f"data root {args.data_root} does not exist", EXIT_IO)
    if not 0 <= args.test_fraction < 1:
        raise CliError(f"--test-fraction must be in [0, 1), got {args.test_fraction}")
    targets = parse_targets(args)
    manifest = build_manifest(os.path.abspath(args.data_root), args.patient_rule)
    if args.test_fraction > 0:
        manifest = patient_split(manifest, args.test_fraction, args.seed)
    else:
        manifest = DatasetManifest([replace(r, split="train") for r in manifest.records])
    manifest = augment_plan(manifest, targets, args.seed)
    leaked = manifest.leaked_patients()
    if leaked:
        raise CliError(f"patient leakage across splits: {sorted(leaked)[:5]}")
    manifest.save(args.out)
    sys.stdout.write(format_summary(manifest))


def cmd_train(args):
    arch = arch_from_args(args)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                       seed=args.seed, shuffle=not args.no_shuffle)
    tcfg.validate()
    train = _manifest_dataset(args.manifest, "train", arch.input_shape[1])
    test = _manifest_dataset(args.manifest, "test", arch.input_shape[1])
    if len(train) == 0:
        raise CliError(f"{args.manifest}: no train records")
    graph = build_model(arch)
    if args.init_weights:
        only = None
        if args.init_scope == "backbone":
            head = set(graph.head_layer_names())
            only = [n for n in graph.state_arrays() if n.split(".", 1)[0] not in head]
        rep = _load_into(graph, args.init_weights, allow_partial=True, only=only)
        log.info("loaded %d tensors from %s; freshly initialised: %s", len(rep.loaded), args.init_weights,
                 ", ".join(rep.missing) or "none")
    policy = FreezePolicy("prefix_list", tuple(args.freeze_prefix)) if args.freeze_prefix else \
        FreezePolicy(args.freeze.replace("-", "_"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = apply_freeze_policy(graph, policy)
    for w in caught:
        log.warning("%s", w.message)
    log.info("frozen parameter tensors: %d", report.frozen)

    def progress(e):
        log.info("epoch %d train_loss %.6f train_acc %.4f test_loss %.6f test_acc %.4f",
                 e.epoch, e.train_loss, e.train_accuracy, e.test_loss, e.test_accuracy)

    try:
        logs = fit(graph, train, tcfg, test if len(test) else None, on_epoch=progress, class_names=list(LABELS))
    except NumericalError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_NUMERIC) from exc
    save_weights(graph, args.out)
    atomic_write_text(args.out + ".arch", arch_sidecar_text(arch))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for e in logs:
        writer.writerow([e.epoch] + [repr(float(v)) for v in
                                     (e.train_loss, e.train_accuracy, e.test_loss, e.test_accuracy)])
    csv_path = args.log_csv or os.path.splitext(args.out)[0] + ".csv"
    atomic_write_text(csv_path, buf.getvalue())
    print(f"wrote {args.out} and {csv_path}")


def parse_reference(items):
    ref = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--reference expects metric=value, got {item!r}")
        k, v = item.split("=", 1)
        value = float(v)
        ref[k.strip()] = value / 100 if value > 1 else value
    return ref


def emit_report(matrix, out_dir, reference):
    rep = metrics.report(matrix)
    kv = rep.to_keyvalue()
    if reference:
        rows = metrics.compare_reference(rep, reference)
        lines = []
        for key, quoted, closest, ok in rows:
            status = "reproduced" if ok else "NOT_REPRODUCED"
            lines.append(f"reference.{key}={quoted:.6f} closest={closest:.6f} {status}")
        kv += "\n".join(lines) + "\n"
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(os.path.join(out_dir, "confusion.tsv"), matrix.to_tsv())
        atomic_write_text(os.path.join(out_dir, "report.txt"), rep.to_text())
        atomic_write_text(os.path.join(out_dir, "report.kv"), kv)
    sys.stdout.write(kv)
    return rep


def cmd_eval(args):
    reference = parse_reference(args.reference)
    if args.verify_matrix:
        with open(args.verify_matrix, encoding="utf-8") as fh:
            matrix = metrics.ConfusionMatrix.from_tsv(fh.read())
        emit_report(matrix, args.out, reference)
        return
    if not (args.manifest and args.weights):
        raise CliError("eval needs --manifest and --weights (or --verify-matrix)")
    arch = arch_from_args(args, read_sidecar(args.weights))
    graph = build_model(arch)
    _load_into(graph, args.weights)
    data = _manifest_dataset(args.manifest, args.split, arch.input_shape[1])
    if len(data) == 0:
        raise CliError(f"{args.manifest}: no records in split {args.split!r}")
    from .trainer import evaluate

    _, matrix = evaluate(graph, data.batches(64, shuffle=False), list(LABELS))
    emit_report(matrix, args.out, reference)


def format_probs(probs, decimals=6):
    """Round to ``decimals`` places so the printed values still sum to exactly 1."""
    scale = 10 ** decimals
    raw = np.asarray(probs, dtype=np.float64) * scale
    units = np.floor(raw).astype(np.int64)
    short = scale - int(units.sum())
    for i in np.argsort(-(raw - units), kind="stable")[:short]:
        units[i] += 1
    return [f"{u // scale}.{u % scale:0{decimals}d}" for u in units]


def cmd_predict(args):
    arch = arch_from_args(args, read_sidecar(args.weights))
    graph = build_model(arch)
    _load_into(graph, args.weights)
    size = arch.input_shape[1:]
    failed = 0
    for path in args.image:
        try:
            img = images.load_image(path)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            failed += 1
            continue
        x = images.resize_normalize(img, size)[None]
        probs = forward_infer(graph, x)[0]
        cls = LABELS[int(np.argmax(probs))]
        print(f"{path}\t{cls}\t" + "\t".join(format_probs(probs)))
    if failed:
        raise CliError(f"{failed} image(s) could not be decoded", EXIT_IO)


def read_epoch_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise CliError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
    cols = {k: [] for k in CSV_HEADER}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise CliError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            vals = [int(row[0])] + [float(v) for v in row[1:]]
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: {exc}") from exc
        for k, v in zip(CSV_HEADER, vals):
            cols[k].append(v)
    if not cols["epoch"]:
        raise CliError(f"{path}: no epoch rows")
    return cols


def cmd_plot(args):
    cols = read_epoch_csv(args.log)
    ep = cols["epoch"]
    acc_svg = line_chart({"train": (ep, cols["train_accuracy"]), "test": (ep, cols["test_accuracy"])},
                         "Accuracy per epoch", "epoch", "accuracy")
    loss_svg = line_chart({"train": (ep, cols["train_loss"]), "test": (ep, cols["test_loss"])},
                          "Loss per epoch", "epoch", "loss")
    atomic_write_text(args.out[0], acc_svg)
    atomic_write_text(args.out[1], loss_svg)
    print(f"wrote {args.out[0]} and {args.out[1]}")


# -- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="cxrnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic 4-class PGM dataset with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("a", "b"), default="a")
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build, split and augment a dataset manifest")
    p.add_argument("--config")
    p.add_argument("--data-root", required=False)
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="fraction of images (by patient) held out; 0 keeps everything in train")
    p.add_argument("--targets", help="train counts per class in label order, comma separated")
    p.add_argument("--target", action="append", help="label=count, repeatable")
    p.add_argument("--patient-rule", choices=("prefix", "sidecar"), default="prefix")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="manifest.tsv")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--config")
    p.add_argument("--manifest")
    _add_arch_args(p, with_defaults=True)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--init-weights")
    p.add_argument("--init-scope", choices=("all", "backbone"), default="all",
                   help="'backbone' keeps a fresh classifier head")
    p.add_argument("--freeze", choices=("none", "feature-extractor"), default="none")
    p.add_argument("--freeze-prefix", action="append", default=[])
    p.add_argument("--out", default="weights.scw")
    p.add_argument("--log-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrix and metrics on a split")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--weights")
    _add_arch_args(p, with_defaults=False)
    p.add_argument("--verify-matrix", help="recompute metrics from a confusion matrix file")
    p.add_argument("--reference", action="append",
                   help="metric=value figure to check against (accuracy, sensitivity, specificity)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify individual images")
    p.add_argument("--weights", required=True)
    _add_arch_args(p, with_defaults=False)
    p.add_argument("--image", nargs="+", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="SVG accuracy and loss charts from an epoch CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--out", nargs=2, default=["accuracy.svg", "loss.svg"], metavar=("ACCURACY_SVG", "LOSS_SVG"))
    p.set_defaults(func=cmd_plot)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = _subparser(parser, args.command)
        apply_config_defaults(sub, read_config_file(args.config))
        args = parser.parse_args(argv)
    if args.command == "prepare" and not args.data_root:
        raise CliError("prepare needs --data-root")
    if args.command == "train" and not args.manifest:
        raise CliError("train needs --manifest")
    echo_settings(args)
    args.func(args)


def main(argv=None):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)
    log.propagate = False
    try:
        run(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CorruptFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, CompletenessError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
