"""Shared fixtures and tiny model factories for the test suite."""

import os

# Pin BLAS threading before numpy loads: the oversubscribed thread pool on
# small CI boxes is slower than single-threaded kernels and adds noise.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from d4d.fields import ModelConfig, SceneModel
from d4d.gridenc import GridConfig


def tiny_model_config(hidden_width: int = 8, geo: int = 4) -> ModelConfig:
    """Smallest config that exercises dense and hashed levels in both grids."""
    return ModelConfig(
        canonical_grid=GridConfig(
            3, 2, 2, 4, features_per_level=2, table_size_log2=6
        ),
        deformation_grid=GridConfig(
            4, 2, 2, 3, features_per_level=2, table_size_log2=6,
            domain_min=(-1.0, -1.0, -1.0, 0.0), domain_max=(1.0, 1.0, 1.0, 1.0),
        ),
        hidden_width=hidden_width,
        geo_feature_dim=geo,
    )


def make_tiny_model(seed: int = 3, dtype=np.float64, randomize: bool = True) -> SceneModel:
    """Double-precision toy scene with nonzero deformation for FD checks."""
    model = SceneModel(tiny_model_config(), seed=seed, dtype=dtype)
    if randomize:
        rng = np.random.default_rng(seed + 100)
        head = model.deformation.head.weights[-1]
        head.value[...] = 0.05 * rng.standard_normal(head.value.shape)
        for tab in model.canonical.encoding.tables + model.deformation.encoding.tables:
            tab.value[...] = 0.3 * rng.standard_normal(tab.value.shape)
    return model


@pytest.fixture
def tiny_model():
    return make_tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
