"""Shared fixtures: small synthetic cities and desk-scale model configs."""

import numpy as np
import pytest

from gridcast.data import prepare_dataset
from gridcast.model import ModelConfig
from gridcast.synth import SynthSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_city():
    """Small coupled city: 8 roads, 4x4 grid, 220 hourly steps."""
    spec = SynthSpec(n_roads=8, n_h=4, n_w=4, steps=220, seed=7,
                     alpha=0.8, sat_dim=4)
    return generate(spec)


@pytest.fixture
def tiny_prepared(tiny_city):
    """(dataset, graph, grid) for the tiny city, filled/split/normalized."""
    dataset = tiny_city.as_dataset()
    prepare_dataset(dataset, p=6, q=2)
    return dataset, tiny_city.graph, tiny_city.grid


@pytest.fixture
def tiny_config():
    """Desk-scale model config matching the tiny city fixtures."""
    return ModelConfig(p=6, q=2, d=8, k=2, l_x=1, l_z=1, seed=0,
                       epochs=2, patience=2, learning_rate=0.002)
