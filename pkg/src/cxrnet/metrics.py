"""Confusion matrices and the accuracy / sensitivity / specificity family.

Orientation: ``counts[predicted, actual]``. Rows are predictions and
columns are ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UndefinedMetricError

UNDEFINED = "undefined"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ConfigError(f"counts must be {k}x{k}, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ConfigError("confusion counts must be non-negative")

    @property
    def total(self):
        return int(self.counts.sum())

    def actual_totals(self):
        return self.counts.sum(axis=0)

    def predicted_totals(self):
        return self.counts.sum(axis=1)

    def permuted(self, order):
        """Same matrix with classes reordered by ``order`` (a list of indices)."""
        order = list(order)
        return ConfusionMatrix(self.counts[np.ix_(order, order)], [self.class_names[i] for i in order])

    def to_tsv(self):
        lines = ["predicted\\actual\t" + "\t".join(self.class_names)]
        for name, row in zip(self.class_names, self.counts):
            lines.append(name + "\t" + "\t".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        rows = [line.split("\t") for line in text.splitlines() if line.strip()]
        if not rows:
            raise ConfigError("empty confusion matrix file")
        names = rows[0][1:]
        body = rows[1:]
        if len(body) != len(names):
            raise ConfigError(f"expected {len(names)} matrix rows, found {len(body)}")
        counts = []
        for lineno, row in enumerate(body, start=2):
            if row[0] != names[lineno - 2] or len(row) != len(names) + 1:
                raise ConfigError(f"line {lineno}: malformed confusion matrix row")
            try:
                counts.append([int(v) for v in row[1:]])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from exc
        return cls(np.array(counts), names)


def build_confusion(predicted, actual, k, class_names=None) -> ConfusionMatrix:
    predicted = np.asarray(predicted, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    if predicted.shape != actual.shape or predicted.ndim != 1:
        raise ConfigError(f"predicted and actual must be equal-length 1-D, got {predicted.shape} and {actual.shape}")
    for label, arr in (("predicted", predicted), ("actual", actual)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ConfigError(f"{label} indices must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (predicted, actual), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


def accuracy(matrix: ConfusionMatrix) -> float:
    if matrix.total == 0:
        raise ConfigError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(matrix.counts)) / matrix.total


def sensitivity(matrix: ConfusionMatrix, c: int) -> float:
    """True positives over every actual member of class ``c``."""
    actual_c = int(matrix.counts[:, c].sum())
    if actual_c == 0:
        raise UndefinedMetricError(f"sensitivity undefined: no actual {matrix.class_names[c]} samples")
    return int(matrix.counts[c, c]) / actual_c


def specificity(matrix: ConfusionMatrix, c: int) -> float:
    """One-vs-rest TN / (TN + FP)."""
    negatives = matrix.total - int(matrix.counts[:, c].sum())
    if negatives == 0:
        raise UndefinedMetricError(f"specificity undefined: no samples outside {matrix.class_names[c]}")
    false_pos = int(matrix.counts[c, :].sum() - matrix.counts[c, c])
    return (negatives - false_pos) / negatives


@dataclass
class ClassMetrics:
    name: str
    sensitivity: object  # float or None when undefined
    specificity: object
    support: int


@dataclass
class MetricReport:
    overall_accuracy: float
    per_class: list
    macro_sensitivity: object
    macro_specificity: object
    weighted_sensitivity: float
    weighted_specificity: object
    total: int
    undefined: list = field(default_factory=list)

    def as_dict(self):
        """Flat key -> value mapping; undefined values become ``"undefined"``."""
        fmt = lambda v: UNDEFINED if v is None else v  # noqa: E731
        out = {
            "total": self.total,
            "accuracy": self.overall_accuracy,
            "macro_sensitivity": fmt(self.macro_sensitivity),
            "macro_specificity": fmt(self.macro_specificity),
            "weighted_sensitivity": fmt(self.weighted_sensitivity),
            "weighted_specificity": fmt(self.weighted_specificity),
        }
        for cm in self.per_class:
            out[f"sensitivity.{cm.name}"] = fmt(cm.sensitivity)
            out[f"specificity.{cm.name}"] = fmt(cm.specificity)
            out[f"support.{cm.name}"] = cm.support
        if self.undefined:
            out["undefined"] = ",".join(self.undefined)
        return out

    def to_keyvalue(self):
        lines = []
        for key, value in self.as_dict().items():
            if isinstance(value, (float, np.floating)):
                value = repr(float(value))
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def to_text(self):
        pct = lambda v: "   n/a" if v is None else f"{100 * v:6.2f}"  # noqa: E731
        width = max(10, max(len(c.name) for c in self.per_class))
        lines = [
            f"{'class':<{width}}  sens(%)  spec(%)  support",
        ]
        for c in self.per_class:
            lines.append(f"{c.name:<{width}}  {pct(c.sensitivity)}   {pct(c.specificity)}  {c.support:>7}")
        lines += [
            "",
            f"overall accuracy     {pct(self.overall_accuracy)} %  ({self.total} samples)",
            f"macro sensitivity    {pct(self.macro_sensitivity)} %",
            f"macro specificity    {pct(self.macro_specificity)} %",
            f"weighted sensitivity {pct(self.weighted_sensitivity)} %",
            f"weighted specificity {pct(self.weighted_specificity)} %",
        ]
        if self.undefined:
            lines.append("undefined: " + ", ".join(self.undefined))
        return "\n".join(lines) + "\n"


def _maybe(fn, matrix, c):
    try:
        return fn(matrix, c)
    except UndefinedMetricError:
        return None


def report(matrix: ConfusionMatrix) -> MetricReport:
    if matrix.total == 0:
        raise ConfigError("cannot report metrics for an empty confusion matrix")
    per_class, undefined = [], []
    support = matrix.actual_totals()
    for c, name in enumerate(matrix.class_names):
        sens = _maybe(sensitivity, matrix, c)
        spec = _maybe(specificity, matrix, c)
        if sens is None:
            undefined.append(f"sensitivity.{name}")
        if spec is None:
            undefined.append(f"specificity.{name}")
        per_class.append(ClassMetrics(name, sens, spec, int(support[c])))

    def mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    def weighted(values):
        pairs = [(v, c.support) for v, c in zip(values, per_class) if v is not None]
        w = sum(s for _, s in pairs)
        return sum(v * s for v, s in pairs) / w if w else None

    sens = [c.sensitivity for c in per_class]
    spec = [c.specificity for c in per_class]
    return MetricReport(
        overall_accuracy=accuracy(matrix),
        per_class=per_class,
        macro_sensitivity=mean(sens),
        macro_specificity=mean(spec),
        weighted_sensitivity=weighted(sens),
        weighted_specificity=weighted(spec),
        total=matrix.total,
        undefined=undefined,
    )


def compare_reference(rep: MetricReport, reference: dict, tol=5e-5):
    """Check externally quoted figures against every aggregate the report holds.

    ``reference`` maps ``accuracy`` / ``sensitivity`` / ``specificity`` to a
    fraction. A figure is reproduced when any candidate aggregation of that
    kind lies within ``tol``. Returns ``[(key, quoted, closest, reproduced)]``.
    """
    candidates = {
        "accuracy": [rep.overall_accuracy],
        "sensitivity": [rep.macro_sensitivity, rep.weighted_sensitivity]
        + [c.sensitivity for c in rep.per_class],
        "specificity": [rep.macro_specificity, rep.weighted_specificity]
        + [c.specificity for c in rep.per_class],
    }
    rows = []
    for key, quoted in reference.items():
        if key not in candidates:
            raise ConfigError(f"unknown reference metric {key!r}")
        vals = [v for v in candidates[key] if v is not None]
        closest = min(vals, key=lambda v: abs(v - quoted))
        rows.append((key, quoted, closest, abs(closest - quoted) <= tol))
    return rows
