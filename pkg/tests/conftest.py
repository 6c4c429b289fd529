"""Shared fixtures: tiny deterministic datasets and model specs."""

from __future__ import annotations

import numpy as np
import pytest

from layergate.encoder import EncoderConfig, ModelSpec
from layergate.features import generate_planted_dataset, make_planted_spec
from layergate.pooling import PoolerConfig


def tiny_planted_spec(**overrides):
    """Three modalities, 4 layers of 8 channels, 24 frames -> 6 TRs, 10 parcels."""
    base = dict(
        layer_counts={"vision": 4, "audio": 4, "text": 4},
        feature_dims={"vision": 8, "audio": 8, "text": 8},
        planted_layers={"vision": 2, "audio": 1, "text": 3},
        parcels=10,
        noise_std=0.05,
        kernel=(0.7, 0.3),
        n_frames=24,
        k_out=6,
        n_subjects=2,
        map_seed=7,
    )
    base.update(overrides)
    return make_planted_spec(**base)


def tiny_model_spec(**enc_overrides) -> ModelSpec:
    enc = dict(hidden=16, depth=1, heads=4, ff_mult=2, n_subjects=2, parcels=10,
               k_out=6, max_frames=32, modality_dropout=0.3)
    enc.update(enc_overrides)
    return ModelSpec(
        channels={"vision": 8, "audio": 8, "text": 8},
        encoder=EncoderConfig(**enc),
        pooler_kind="xattn",
        pooler=PoolerConfig(n_queries=2, heads=2, attention_dropout=0.2),
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_planted_dataset(tiny_planted_spec(), n_windows=10, seed=11)


@pytest.fixture(scope="session")
def tiny_windows(tiny_dataset):
    return tiny_dataset.windows


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
