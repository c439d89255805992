"""Dataset manifests: assembly, patient-exclusive splits and oversampling plans."""

from __future__ import annotations

import csv
import os
import re
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError
from ..io_utils import atomic_write_text
from . import images

LABELS = ("normal", "covid19", "bacterial_pneumonia", "viral_pneumonia")
SPLITS = ("train", "test")
IMAGE_SUFFIXES = (".pgm", ".png")
AUG_KINDS = ("hflip", "rotate", "distort")
MAX_ROTATION = 15.0
MAX_AMPLITUDE = 0.05
SIDECAR = "patients.csv"

MANIFEST_HEADER = ("path", "label", "patient_id", "split", "provenance", "transform", "transform_seed")


class SplitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TransformSpec:
    """``param`` is degrees for rotate and amplitude (fraction of width) for distort."""

    kind: str
    param: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("identity",) + AUG_KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")

    def validate(self, max_rotation=MAX_ROTATION, max_amplitude=MAX_AMPLITUDE):
        if self.kind == "rotate" and not -max_rotation <= self.param <= max_rotation:
            raise ConfigError(f"rotation {self.param} outside +-{max_rotation} degrees")
        if self.kind == "distort" and not 0 < self.param <= max_amplitude:
            raise ConfigError(f"distortion amplitude {self.param} outside (0, {max_amplitude}]")

    def to_text(self):
        if self.kind in ("rotate", "distort"):
            return f"{self.kind}({self.param!r})"
        return self.kind

    @classmethod
    def from_text(cls, text, seed):
        m = re.fullmatch(r"(\w+)(?:\(([^)]*)\))?", text.strip())
        if not m:
            raise ConfigError(f"cannot parse transform {text!r}")
        kind, arg = m.group(1), m.group(2)
        return cls(kind, float(arg) if arg else 0.0, int(seed))


def apply_transform(img, spec: TransformSpec):
    if spec.kind == "identity":
        return images.ImageBuffer(img.pixels.copy())
    if spec.kind == "hflip":
        return images.hflip(img)
    if spec.kind == "rotate":
        return images.rotate(img, spec.param)
    return images.distort(img, spec.param, spec.seed)


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: str
    patient_id: str
    split: str = None  # None until patient_split assigns one
    provenance: str = "original"
    transform: TransformSpec = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ConfigError(f"unknown label {self.label!r}")
        if self.split not in (None,) + SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        if self.provenance == "original" and self.transform is not None:
            raise ConfigError("original records carry no transform")
        if self.provenance == "augmented" and self.transform is None:
            raise ConfigError("augmented records need a transform")
        if self.provenance not in ("original", "augmented"):
            raise ConfigError(f"unknown provenance {self.provenance!r}")


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)

    @property
    def class_counts(self):
        """Counter keyed by ``(label, split, provenance)``."""
        return Counter((r.label, r.split, r.provenance) for r in self.records)

    def count(self, label=None, split=None, provenance=None):
        return sum(
            1
            for r in self.records
            if (label is None or r.label == label)
            and (split is None or r.split == split)
            and (provenance is None or r.provenance == provenance)
        )

    def select(self, split):
        return [r for r in self.records if r.split == split]

    def patients_by_split(self):
        out = defaultdict(set)
        for r in self.records:
            out[r.split].add(r.patient_id)
        return out

    def leaked_patients(self):
        """Patients present in both splits (empty when the split is exclusive)."""
        by = self.patients_by_split()
        return by.get("train", set()) & by.get("test", set())

    def summary_rows(self):
        """Per label: (train originals, train total, test total)."""
        return [
            (
                label,
                self.count(label, "train", "original"),
                self.count(label, "train"),
                self.count(label, "test"),
            )
            for label in LABELS
        ]

    def to_text(self):
        lines = ["\t".join(MANIFEST_HEADER)]
        for r in self.records:
            fields = (
                r.path,
                r.label,
                r.patient_id,
                r.split or "-",
                r.provenance,
                r.transform.to_text() if r.transform else "-",
                str(r.transform.seed) if r.transform else "-",
            )
            for f in fields:
                if "\t" in f or "\n" in f:
                    raise ConfigError(f"manifest field contains a tab or newline: {f!r}")
            lines.append("\t".join(fields))
        return "\n".join(lines) + "\n"

    def save(self, path):
        atomic_write_text(path, self.to_text())

    @classmethod
    def from_text(cls, text, source="<manifest>"):
        lines = text.splitlines()
        if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
            raise ConfigError(f"{source}: missing or wrong manifest header")
        records = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_HEADER):
                raise ConfigError(f"{source}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(parts)}")
            path, label, pid, split, prov, tf, tseed = parts
            try:
                transform = None if tf == "-" else TransformSpec.from_text(tf, tseed)
                records.append(SampleRecord(path, label, pid, None if split == "-" else split, prov, transform))
            except (ConfigError, ValueError) as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from exc
        return cls(records)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), source=str(path))


# -- assembly


def _read_sidecar(root):
    path = os.path.join(root, SIDECAR)
    if not os.path.exists(path):
        return None
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            table[row["filename"]] = row["patient_id"]
    return table


def patient_from_filename(name):
    stem = os.path.splitext(name)[0]
    return stem.split("_", 1)[0]


def build_manifest(root_dir, patient_id_rule="prefix", relative=False) -> DatasetManifest:
    """One original record per image under ``root_dir/<label>/``.

    ``patient_id_rule`` is ``"prefix"`` (filename text before the first
    underscore) or ``"sidecar"``. With ``"prefix"`` a ``patients.csv``
    (columns ``filename,patient_id``) in the root still takes precedence for
    the files it lists.
    """
    if patient_id_rule not in ("prefix", "sidecar"):
        raise ConfigError(f"unknown patient id rule {patient_id_rule!r}")
    root = os.fspath(root_dir)
    if not os.path.isdir(root):
        raise ConfigError(f"data root {root} is not a directory")
    sidecar = _read_sidecar(root)
    if patient_id_rule == "sidecar" and sidecar is None:
        raise ConfigError(f"patient id rule 'sidecar' needs {os.path.join(root, SIDECAR)}")
    subdirs = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    unknown = [d for d in subdirs if d not in LABELS]
    if unknown:
        raise ConfigError(f"unknown class directories under {root}: {', '.join(unknown)}")
    records = []
    for label in LABELS:
        cdir = os.path.join(root, label)
        if not os.path.isdir(cdir):
            continue
        for name in sorted(os.listdir(cdir)):
            full = os.path.join(cdir, name)
            if not os.path.isfile(full) or not name.lower().endswith(IMAGE_SUFFIXES):
                continue
            if images.sniff_format(full) is None:
                warnings.warn(f"skipping unreadable image {full}", stacklevel=2)
                continue
            rel = os.path.join(label, name)
            if sidecar is not None and rel in sidecar:
                pid = sidecar[rel]
            elif patient_id_rule == "sidecar":
                warnings.warn(f"{rel} has no entry in {SIDECAR}; skipped", stacklevel=2)
                continue
            else:
                pid = patient_from_filename(name)
            records.append(SampleRecord(rel if relative else full, label, pid))
    return DatasetManifest(records)


# -- splitting


def patient_split(manifest: DatasetManifest, test_fraction: float, seed: int) -> DatasetManifest:
    """Assign whole patients to train or test, per class, close to ``test_fraction``.

    A patient whose images span several classes is placed with the class
    of their first record, and all their images follow that decision.
    """
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    home, sizes = {}, Counter()
    for r in manifest.records:
        home.setdefault(r.patient_id, r.label)
        sizes[r.patient_id] += 1
    test_patients = set()
    for label in LABELS:
        patients = sorted(p for p, lab in home.items() if lab == label)
        if not patients:
            continue
        if len(patients) == 1:
            warnings.warn(f"class {label} has a single patient; it cannot appear in both splits", SplitWarning,
                          stacklevel=2)
        n_images = sum(sizes[p] for p in patients)
        target = round(test_fraction * n_images)
        order = [patients[i] for i in rng.permutation(len(patients))]
        chosen, count, rest = [], 0, []
        for p in order:
            if count + sizes[p] <= target:
                chosen.append(p)
                count += sizes[p]
            else:
                rest.append(p)
        if count < target and rest:
            best = min(rest, key=lambda p: abs(target - count - sizes[p]))
            if abs(target - count - sizes[best]) < target - count:
                chosen.append(best)
        test_patients.update(chosen)
    records = [replace(r, split="test" if r.patient_id in test_patients else "train") for r in manifest.records]
    return DatasetManifest(records)


# -- oversampling


def augment_plan(manifest: DatasetManifest, targets: dict, seed: int,
                 max_rotation=MAX_ROTATION, max_amplitude=MAX_AMPLITUDE) -> DatasetManifest:
    """Append augmented train records until each class reaches ``targets[label]``.

    Sources are taken round-robin over a seeded shuffle of the class's
    original train records, so every original is reused either
    floor(deficit / n) or ceil(deficit / n) times.
    """
    unknown = set(targets) - set(LABELS)
    if unknown:
        raise ConfigError(f"targets given for unknown labels: {', '.join(sorted(unknown))}")
    rng = np.random.default_rng(seed)
    added = []
    for label in LABELS:
        if label not in targets:
            continue
        target = int(targets[label])
        originals = sorted(
            (r for r in manifest.records if r.label == label and r.split == "train" and r.provenance == "original"),
            key=lambda r: r.path,
        )
        have = manifest.count(label, "train")
        deficit = target - have
        if deficit < 0:
            raise ConfigError(f"target {target} for {label} is below its {have} existing train images")
        if deficit and not originals:
            raise ConfigError(f"cannot augment {label}: no original train images")
        if not deficit:
            continue
        order = [originals[i] for i in rng.permutation(len(originals))]
        kinds = rng.integers(0, len(AUG_KINDS), deficit)
        for i in range(deficit):
            src = order[i % len(order)]
            kind = AUG_KINDS[kinds[i]]
            if kind == "rotate":
                param = float(rng.uniform(-max_rotation, max_rotation))
            elif kind == "distort":
                param = float(max_amplitude * (1.0 - rng.random()))  # (0, max]
            else:
                param = 0.0
            spec = TransformSpec(kind, param, int(rng.integers(2**63)))
            added.append(replace(src, provenance="augmented", transform=spec))
    return DatasetManifest(list(manifest.records) + added)
