import os

import numpy as np
import pytest

from cxrnet.model import ArchConfig

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def toy_config(seed=0, **overrides):
    """Two separable blocks and a 64-unit head on 16x16 single-channel input."""
    kw = dict(block_specs=((8, 2), (16, 2)), head_units=64, input_shape=(1, 16, 16),
              stem_channels=8, stem_stride=1, seed=seed)
    kw.update(overrides)
    return ArchConfig(**kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def published_matrix_path():
    return os.path.join(FIXTURES, "published_confusion.tsv")


PUBLISHED_ORIGINALS = {"normal": 4096, "covid19": 254, "bacterial_pneumonia": 5560, "viral_pneumonia": 2986}
PUBLISHED_TARGETS = {"normal": 6096, "covid19": 6000, "bacterial_pneumonia": 6000, "viral_pneumonia": 6000}


def write_tiny_pgm(path, value=128):
    with open(path, "wb") as fh:
        fh.write(b"P5\n2 2\n255\n" + bytes([value % 256] * 4))


def make_tree(root, counts, per_patient=1):
    """One directory per label holding ``counts[label]`` 2x2 PGM files.

    Files are named ``<label-prefix><patient>_<k>.pgm`` so the default
    prefix rule groups ``per_patient`` consecutive files per patient.
    """
    for label, n in counts.items():
        d = os.path.join(root, label)
        os.makedirs(d, exist_ok=True)
        for i in range(n):
            write_tiny_pgm(os.path.join(d, f"{label[:3]}{i // per_patient:05d}_{i % per_patient}.pgm"), i)
    return root
