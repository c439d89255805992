"""Decoding manifest records into seeded, shuffled tensor batches."""

from __future__ import annotations

import os

import numpy as np

from ..errors import DecodeError
from .images import load_image, resize_normalize
from .manifest import LABELS, apply_transform

DEFAULT_SIZE = (224, 224)


class ManifestDataset:
    """Records of one split, decoded lazily with a per-record cache.

    Relative record paths resolve against ``root``. Decoding is a pure
    function of the record (augmented records carry their transform seed),
    so caching never changes the pixels delivered.
    """

    def __init__(self, records, image_size=DEFAULT_SIZE, root=None, cache=True, dtype=np.float32):
        self.records = list(records)
        self.image_size = tuple(image_size)
        self.root = root
        self.dtype = dtype
        self._cache = {} if cache else None
        self.labels = np.array([LABELS.index(r.label) for r in self.records], dtype=np.int64)

    def __len__(self):
        return len(self.records)

    def _resolve(self, path):
        if self.root is not None and not os.path.isabs(path):
            return os.path.join(self.root, path)
        return path

    def decode(self, i):
        rec = self.records[i]
        key = (rec.path, rec.transform)
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        path = self._resolve(rec.path)
        try:
            img = load_image(path)
        except OSError as exc:
            raise DecodeError(f"cannot decode {path}: {exc}") from exc
        if rec.transform is not None:
            img = apply_transform(img, rec.transform)
        arr = resize_normalize(img, self.image_size, dtype=self.dtype)
        if self._cache is not None:
            self._cache[key] = arr
        return arr

    def batches(self, batch_size, seed=0, epoch=0, shuffle=True):
        order = np.arange(len(self.records))
        if shuffle:
            order = np.random.default_rng([seed, epoch]).permutation(len(self.records))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            x = np.stack([self.decode(i) for i in idx])
            yield x, self.labels[idx]


def batch_iter(manifest, split, batch_size, seed, epoch_index, image_size=DEFAULT_SIZE, root=None,
               shuffle=True):
    """Yield ``(N x 1 x H x W array, labels)`` for one epoch over ``split``."""
    ds = ManifestDataset(manifest.select(split), image_size, root=root, cache=False)
    return ds.batches(batch_size, seed, epoch_index, shuffle)
