from __future__ import annotations

import numpy as np
import pytest

from geocsp.data import Dataset
from geocsp.location import LocationEncoder, PositionalEncodingConfig


def small_encoder(rng, embed_dim=8, dropout=0.5, hidden_units=12, n_scales=2, kind="grid"):
    pe = PositionalEncodingConfig(kind, n_scales, 0.05, 1.0)
    return LocationEncoder.init(rng, pe, hidden_units=hidden_units, embed_dim=embed_dim, dropout=dropout)


def random_batch(rng, n, feature_dim=5, n_classes=0):
    locs = np.column_stack([rng.uniform(-np.pi, np.pi, n), rng.uniform(-1.4, 1.4, n)])
    labels = rng.integers(0, n_classes, n) if n_classes else None
    return Dataset(locs, rng.standard_normal((n, feature_dim)), labels, n_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
