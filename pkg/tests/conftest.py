"""
pytest configuration and shared fixtures for the MINO test suite

Provides small point sets, GP specs, a tiny model configuration and a
dataset factory shared by the module tests.
"""

import numpy as np
import pytest

from mino.gaussian_field import GPSpec, Smoothness
from mino.geometry import Box, FunctionBatch, make_grid_point_set, random_box_point_set
from mino.model import LatentGridConfig, ModelConfig, VelocityModel


@pytest.fixture
def rng():
    """Seeded generator for test inputs"""
    return np.random.default_rng(1234)


@pytest.fixture
def unit_box():
    return Box.unit(2)


@pytest.fixture
def mesh_points(unit_box):
    """Irregular 2D mesh of 40 points"""
    return random_box_point_set(40, unit_box, seed=7)


@pytest.fixture
def line_points():
    """Regular 1D grid of 16 cell centers"""
    return make_grid_point_set((16,), Box.unit(1))


@pytest.fixture
def smooth_gp():
    return GPSpec(length_scale=0.3, smoothness=Smoothness.THREE_HALVES)


@pytest.fixture
def rough_gp():
    return GPSpec(length_scale=0.05, smoothness=Smoothness.HALF)


@pytest.fixture
def tiny_config():
    """N_node=4, L=8, H=2, one encoder and one decoder block"""
    return ModelConfig(latent_dim=8, heads=2, encoder_blocks=1, decoder_blocks=1, radius=0.6,
                       latent_grid=LatentGridConfig(shape=(2, 2)), pos_dim=2, pos_embed_dim=4,
                       time_embed_dim=8, gno_hidden=8, mlp_ratio=2)


@pytest.fixture
def line_config():
    """Small 1D model used by the training and generation tests"""
    return ModelConfig.desk(latent_dim=8, heads=2, encoder_blocks=1, decoder_blocks=1, radius=0.2,
                            latent_grid=LatentGridConfig(shape=(4,)), pos_embed_dim=4,
                            time_embed_dim=8, gno_hidden=8)


@pytest.fixture
def tiny_model(tiny_config):
    return VelocityModel(tiny_config)


def _randomize_parameters(model, seed: int = 0, scale: float = 0.3):
    model.params.load_flat(np.random.default_rng(seed).normal(scale=scale, size=len(model.params)))
    return model


@pytest.fixture
def randomize():
    """Replaces a model's (partly zero) initialization with dense random values"""
    return _randomize_parameters


@pytest.fixture
def random_batch(rng, mesh_points):
    """FunctionBatch of 5 white-noise samples on the 40-point mesh"""
    return FunctionBatch(values=rng.standard_normal((5, 1, mesh_points.n_points)), points=mesh_points)


# Pytest configuration
def pytest_configure(config):
    """Configure pytest settings"""
    config.addinivalue_line(
        "markers", "slow: acceptance-scale check (minutes); run with -m slow"
    )


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless a marker expression selects them"""
    if config.option.markexpr:
        return
    skip_slow = pytest.mark.skip(reason="slow; run with -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
