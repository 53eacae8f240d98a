"""
Tests for the training and evaluation loops.
"""

import math

import numpy as np
import pytest

from pointabm.data import make_synthetic_dataset
from pointabm.model import ModelConfig, init_weights
from pointabm.pointops import AugmentationSpec
from pointabm.training import (
    TrainingConfig, augmented_patches, decay_mask, evaluate, prepare_patches, pretrain_epoch,
    steps_per_epoch, train_epoch
)

KINDS = ['sphere', 'cube', 'torus', 'plane']


@pytest.fixture
def datasets():
    return make_synthetic_dataset(5, kinds=KINDS, n_points=96, split_seed=2)


@pytest.fixture
def config(tiny_model):
    return ModelConfig(**tiny_model)


def _train_config(**overrides):
    values = dict(epochs=3, batch_size=8, lr_max=5e-3, lr_min=1e-4, weight_decay=0.0)
    values.update(overrides)
    return TrainingConfig(**values)


class TestHelpers:
    def test_steps_per_epoch(self):
        assert steps_per_epoch(16, 8) == 2
        assert steps_per_epoch(17, 8) == 3
        assert steps_per_epoch(1, 32) == 1

    def test_decay_mask_skips_vectors(self, config):
        mask = decay_mask(init_weights(config))
        assert mask['encoder.patch_embed.fc1.weight'] is True
        assert mask['encoder.patch_embed.fc1.bias'] is False
        assert mask['encoder.bissm.0.forward.d_skip'] is False
        assert mask['encoder.bissm.0.forward.a_log'] is False

    def test_prepare_patches_is_cached(self, datasets, config):
        train, _ = datasets
        centers, patches = prepare_patches(train, config)
        assert centers.shape == (16, 4, 3)
        assert patches.shape == (16, 4, 8, 3)
        again = prepare_patches(train, config)
        assert again[0] is centers

    def test_augmented_patches_shapes(self, datasets, config):
        train, _ = datasets
        spec = AugmentationSpec(scale=True, translate=True, rotate=True)
        centers, patches = augmented_patches(train, np.array([0, 5]), config, spec,
                                             np.random.default_rng(0))
        assert centers.shape == (2, 4, 3)
        assert patches.shape == (2, 4, 8, 3)

    def test_augmentation_off_matches_cache(self, datasets, config):
        train, _ = datasets
        cached_centers, cached_patches = prepare_patches(train, config)
        centers, patches = augmented_patches(train, np.array([3]), config, AugmentationSpec(),
                                             np.random.default_rng(0))
        np.testing.assert_allclose(centers[0], cached_centers[3], atol=1e-12)
        np.testing.assert_allclose(patches[0], cached_patches[3], atol=1e-12)


class TestTrainEpoch:
    def test_one_epoch_updates_weights(self, datasets, config):
        train, _ = datasets
        weights = init_weights(config, np.random.default_rng(0))
        before = {n: a.copy() for n, a in weights.state_dict().items()}
        train_config = _train_config()
        state = train_config.optimizer_state(weights)
        weights, state, metrics = train_epoch(train, weights, state, config, train_config,
                                              np.random.default_rng(1))
        assert state.step == 2
        assert metrics.step == 2
        assert math.isfinite(metrics.loss)
        assert 0.0 <= metrics.accuracy <= 1.0
        assert any(not np.array_equal(before[n], a) for n, a in weights.state_dict().items())
        assert all(p.grad is None for p in weights.parameters())

    def test_learning_rate_follows_cosine(self, datasets, config):
        train, _ = datasets
        weights = init_weights(config, np.random.default_rng(0))
        train_config = _train_config(epochs=2)
        state = train_config.optimizer_state(weights)
        lrs = []
        for epoch in range(2):
            weights, state, metrics = train_epoch(train, weights, state, config, train_config,
                                                  np.random.default_rng(epoch), epoch=epoch)
            lrs.append(metrics.lr)
        assert lrs[0] > lrs[1] > train_config.lr_min

    def test_same_seed_same_weights(self, datasets, config):
        train, _ = datasets
        results = []
        for _ in range(2):
            weights = init_weights(config, np.random.default_rng(0))
            train_config = _train_config()
            state = train_config.optimizer_state(weights)
            weights, _, _ = train_epoch(train, weights, state, config, train_config,
                                        np.random.default_rng(1))
            results.append(weights.state_dict())
        for name, array in results[0].items():
            assert array.tobytes() == results[1][name].tobytes()

    def test_with_augmentation(self, datasets, config):
        train, _ = datasets
        weights = init_weights(config, np.random.default_rng(0))
        train_config = _train_config(augmentation=AugmentationSpec(rotate=True, scale=True))
        state = train_config.optimizer_state(weights)
        _, state, metrics = train_epoch(train, weights, state, config, train_config,
                                        np.random.default_rng(1))
        assert math.isfinite(metrics.loss)

    def test_zero_learning_rate_leaves_weights(self, datasets, config):
        train, _ = datasets
        weights = init_weights(config, np.random.default_rng(0))
        before = {n: a.copy() for n, a in weights.state_dict().items()}
        train_config = _train_config(lr_max=0.0, lr_min=0.0, weight_decay=0.05)
        state = train_config.optimizer_state(weights)
        weights, state, metrics = train_epoch(train, weights, state, config, train_config,
                                              np.random.default_rng(1))
        assert state.step == 2
        assert metrics.lr == 0.0
        for name, array in weights.state_dict().items():
            np.testing.assert_array_equal(array, before[name])


class TestEvaluate:
    def test_does_not_modify_weights(self, datasets, config):
        _, test = datasets
        weights = init_weights(config, np.random.default_rng(0))
        before = {n: a.copy() for n, a in weights.state_dict().items()}
        result = evaluate(test, weights, config, batch_size=3)
        for name, array in weights.state_dict().items():
            np.testing.assert_array_equal(array, before[name])
        assert result.count == len(test)
        assert set(result.per_class) == set(KINDS)
        assert all(p.grad is None for p in weights.parameters())

    def test_batch_size_does_not_change_predictions(self, datasets, config):
        _, test = datasets
        weights = init_weights(config, np.random.default_rng(0))
        a = evaluate(test, weights, config, batch_size=1)
        b = evaluate(test, weights, config, batch_size=32)
        assert a.accuracy == b.accuracy
        assert a.loss == pytest.approx(b.loss)

    def test_to_dict(self, datasets, config):
        _, test = datasets
        data = evaluate(test, init_weights(config, np.random.default_rng(0)), config).to_dict()
        assert set(data) == {'accuracy', 'per_class', 'loss', 'count'}


class TestPretrainEpoch:
    def test_runs_and_updates_decoder(self, datasets, config):
        train, _ = datasets
        weights = init_weights(config, np.random.default_rng(0), head=False, decoder=True)
        before = weights.decoder.predictor.weight.data.copy()
        train_config = _train_config()
        state = train_config.optimizer_state(weights)
        weights, state, metrics = pretrain_epoch(train, weights, state, config, train_config,
                                                 np.random.default_rng(1))
        assert math.isfinite(metrics.loss) and metrics.loss > 0.0
        assert metrics.accuracy is None
        assert not np.array_equal(before, weights.decoder.predictor.weight.data)


@pytest.mark.slow
class TestConvergence:
    def test_overfits_small_training_set(self, config):
        train, _ = make_synthetic_dataset(20, kinds=KINDS, n_points=96, split_seed=0)
        assert len(train) == 64
        weights = init_weights(config, np.random.default_rng(0))
        train_config = _train_config(epochs=200, lr_max=5e-3, lr_min=1e-5)
        state = train_config.optimizer_state(weights)

        initial = evaluate(train, weights, config)
        assert initial.loss == pytest.approx(math.log(4.0), rel=0.05)

        rng = np.random.default_rng(1)
        accuracy = initial.accuracy
        for epoch in range(train_config.epochs):
            weights, state, _ = train_epoch(train, weights, state, config, train_config, rng, epoch)
            if (epoch + 1) % 20 == 0:
                accuracy = evaluate(train, weights, config).accuracy
                if accuracy == 1.0:
                    break
        assert accuracy == 1.0

    def test_pretraining_reduces_chamfer(self, config):
        train, _ = make_synthetic_dataset(8, kinds=KINDS, n_points=96, split_seed=0)
        weights = init_weights(config, np.random.default_rng(0), head=False, decoder=True)
        train_config = _train_config(epochs=15)
        state = train_config.optimizer_state(weights)
        rng = np.random.default_rng(1)
        losses = []
        for epoch in range(train_config.epochs):
            weights, state, metrics = pretrain_epoch(train, weights, state, config, train_config,
                                                     rng, epoch)
            losses.append(metrics.loss)
        assert np.mean(losses[-3:]) < np.mean(losses[:3])
