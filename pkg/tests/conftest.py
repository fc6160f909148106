from itertools import product

import numpy as np
import pytest

from sparseloc.sparse import SparseTensor


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def cube_tensor(size: int, channels: int = 1, rng=None, batch: int = 0) -> SparseTensor:
    """Fully occupied size^3 support at stride 1."""
    coords = np.array([(batch, i, j, k) for i, j, k in product(range(size), repeat=3)],
                      dtype=np.int64)
    if rng is None:
        feats = np.ones((len(coords), channels))
    else:
        feats = rng.uniform(-1.0, 1.0, (len(coords), channels))
    return SparseTensor(coords, feats, stride=1)


def line_tensor(xs, channels: int = 1, value: float = 1.0) -> SparseTensor:
    coords = np.array(sorted((0, int(x), 0, 0) for x in xs), dtype=np.int64)
    feats = np.full((len(coords), channels), value, dtype=np.float64)
    return SparseTensor(coords, feats, stride=1)
