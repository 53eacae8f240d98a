"""Shared pytest configuration and fixtures."""

import numpy as np
import pytest

TINY_MODEL = {
    'points_per_cloud': 64,
    'n_patches': 4,
    'patch_size': 8,
    'width': 16,
    'transformer_layers': 1,
    'heads': 2,
    'bissm_layers': 2,
    'ffn_ratio': 2,
    'd_state': 4,
    'expand': 2,
    'conv_width': 4,
    'embed_hidden': 8,
    'pos_hidden': 8,
    'head_hidden': 16,
    'num_classes': 4,
    'dropout': 0.0,
    'mask_ratio': 0.5,
    'decoder_layers': 1,
}

TINY_KINDS = ['sphere', 'cube', 'torus', 'plane']


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: end-to-end training runs (deselect with -m "not slow")')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    """Architecture fields of a model small enough to train in seconds."""
    return dict(TINY_MODEL)


@pytest.fixture
def tiny_run(tmp_path):
    """A complete flat run document around the tiny model and a 4-class synthetic set."""
    return {
        **TINY_MODEL,
        'kinds': list(TINY_KINDS),
        'n_per_class': 5,
        'n_points': 96,
        'epochs': 2,
        'batch_size': 8,
        'lr_max': 5e-3,
        'lr_min': 1e-4,
        'weight_decay': 0.0,
        'seed': 0,
        'out': str(tmp_path / 'run'),
    }
