"""Synthetic 4-class texture images for desk-scale training runs.

Each image is a smooth random background plus one or two sinusoidal
gratings and pixel noise. The class decides the grating orientations:

* task ``a``: one grating at 0, 90, 45 or 135 degrees.
* task ``b``: two superimposed gratings, {0, 90}, {45, 135}, {0, 45}, {90, 135},
  with stronger pixel noise.

Both tasks are built from the same oriented-edge vocabulary, which is
what makes features learned on ``a`` reusable for ``b``.
"""

from __future__ import annotations

import os

import numpy as np

from .images import save_pgm
from .manifest import LABELS, DatasetManifest, SampleRecord

NOISE = {"a": 0.08, "b": 0.12}

TASKS = {
    "a": ((0,), (90,), (45,), (135,)),
    "b": ((0, 90), (45, 135), (0, 45), (90, 135)),
}


def render(orientations, size, rng, noise=0.08):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # background: random linear ramp plus a soft central blob
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 3) ** 2))
    ramp = rng.uniform(-0.15, 0.15) * (xx / size) + rng.uniform(-0.15, 0.15) * (yy / size)
    img = 0.35 + rng.uniform(0.05, 0.2) * blob + ramp
    for deg in orientations:
        theta = np.deg2rad(deg + rng.uniform(-8, 8))
        period = rng.uniform(3.5, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.12, 0.2)
        img += amp * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    img += rng.normal(0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_arrays(task="a", n_per_class=50, size=16, seed=0):
    """In-memory ``(x, y)``; ``x`` is N x 1 x size x size float32, classes interleaved."""
    rng = np.random.default_rng(seed)
    patterns = TASKS[task]
    x = np.empty((n_per_class * len(patterns), 1, size, size), dtype=np.float32)
    y = np.empty(n_per_class * len(patterns), dtype=np.int64)
    i = 0
    for _ in range(n_per_class):
        for label, orient in enumerate(patterns):
            x[i, 0] = render(orient, size, rng, NOISE[task])
            y[i] = label
            i += 1
    return x, y


def write_dataset(root, task="a", n_train=50, n_test=20, size=16, seed=0):
    """Write PGM files under ``root/<label>/`` and return a split manifest.

    Every image gets its own patient id, and the first ``n_train`` images
    per class are train. The manifest uses paths relative to ``root``.
    """
    root = os.fspath(root)
    rng = np.random.default_rng(seed)
    records = []
    for label, orient in zip(LABELS, TASKS[task]):
        os.makedirs(os.path.join(root, label), exist_ok=True)
        for i in range(n_train + n_test):
            name = f"{task}{LABELS.index(label)}p{i:04d}_0.pgm"
            save_pgm(os.path.join(root, label, name), render(orient, size, rng, NOISE[task]))
            split = "train" if i < n_train else "test"
            records.append(SampleRecord(os.path.join(label, name), label, name.split("_")[0], split))
    manifest = DatasetManifest(records)
    manifest.save(os.path.join(root, "manifest.tsv"))
    return manifest
