"""
Unit tests for model assembly, fusion, masking and parameter accounting.
"""

import numpy as np
import pytest

from pointabm.blocks import bi_ssm_block, embed_patches, pos_encode, transformer_block
from pointabm.gradcheck import grad_check
from pointabm.model import (
    FusionMode, ModelConfig, chamfer, chamfer_loss, classification_loss, encode, forward,
    forward_batch, fuse, init_weights, mae_loss, mae_mask, mask_counts, mask_indices,
    param_count, param_table, patch_cloud
)
from pointabm.numeric import ShapeError, Tensor
from pointabm.pointops import PointCloud


def _batch(rng, config, batch=2):
    centers = rng.standard_normal((batch, config.n_patches, 3)) * 0.5
    patches = rng.standard_normal((batch, config.n_patches, config.patch_size, 3)) * 0.1
    return centers, patches


class TestModelConfig:
    def test_stream_width(self, tiny_model):
        assert ModelConfig(**tiny_model).stream_width == 16
        assert ModelConfig(**{**tiny_model, 'fusion': 'concat'}).stream_width == 32
        assert ModelConfig(**{**tiny_model, 'fusion': 'concat', 'transformer_layers': 0}).stream_width == 16

    def test_dt_rank_default(self):
        assert ModelConfig().resolved_dt_rank == 24
        assert ModelConfig(dt_rank=5).resolved_dt_rank == 5

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            ModelConfig(fusion='sum')
        with pytest.raises(ValueError):
            ModelConfig(ssm_direction='sideways')
        with pytest.raises(ValueError):
            ModelConfig(serialization='zorder')
        with pytest.raises(ShapeError):
            ModelConfig(width=10, heads=3)

    def test_from_dict_ignores_unknown_keys(self, tiny_model):
        config = ModelConfig.from_dict({**tiny_model, 'epochs': 7})
        assert config.to_dict() == ModelConfig(**tiny_model).to_dict()


class TestParamCount:
    def test_default_configuration(self):
        assert param_count(ModelConfig(num_classes=15)) == 14_911_503

    def test_forward_only_ablation(self):
        assert param_count(ModelConfig(num_classes=15, ssm_direction='forward')) == 13_962_255

    def test_without_transformer(self):
        assert param_count(ModelConfig(num_classes=15, transformer_layers=0)) == 13_138_191

    def test_concat_is_larger_than_residual(self, tiny_model):
        residual = param_count(ModelConfig(**tiny_model))
        assert param_count(ModelConfig(**{**tiny_model, 'fusion': 'concat'})) > residual

    def test_tiny_breakdown(self, tiny_model):
        rows = dict(param_table(ModelConfig(**tiny_model)))
        assert rows == {
            'patch_embed': 1248,
            'pos_embed': 176,
            'transformer.0': 2176,
            'bissm.0': 2912,
            'bissm.1': 2912,
            'norm': 32,
            'head': 596,
            'total': 10052,
        }

    def test_table_sums_to_total(self, tiny_model):
        table = param_table(ModelConfig(**{**tiny_model, 'fusion': 'concat'}))
        assert sum(count for _, count in table[:-1]) == table[-1][1]


class TestFuse:
    def test_residual_adds(self):
        out = fuse(np.ones((1, 2, 3)), np.full((1, 2, 3), 2.0), 'residual')
        np.testing.assert_array_equal(out.data, 3.0)

    def test_concat_doubles_width(self):
        out = fuse(np.ones((1, 2, 3)), np.zeros((1, 2, 3)), FusionMode.CONCAT)
        assert out.shape == (1, 2, 6)
        np.testing.assert_array_equal(out.data[..., :3], 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(np.ones((1, 2, 3)), np.ones((1, 2, 4)), 'residual')

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match='unknown fusion'):
            fuse(np.ones(3), np.ones(3), 'gated')


class TestEncode:
    def test_residual_fusion_feeds_transformer_output(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        weights = init_weights(config, rng)
        centers, patches = _batch(rng, config)
        encoder = weights.encoder

        pre = embed_patches(Tensor(patches), encoder.patch_embed) + pos_encode(centers, encoder.pos_embed)
        stream = transformer_block(pre, encoder.transformer[0])
        for block in encoder.bissm:
            stream = bi_ssm_block(stream, block)
        expected = encoder.norm(stream).data
        np.testing.assert_allclose(encode(centers, patches, encoder, config).data, expected, atol=1e-10)

    def test_no_transformer_skips_fusion(self, rng, tiny_model):
        config = ModelConfig(**{**tiny_model, 'transformer_layers': 0, 'fusion': 'concat'})
        weights = init_weights(config, rng)
        centers, patches = _batch(rng, config)
        assert weights.encoder.transformer == []
        assert encode(centers, patches, weights.encoder, config).shape == (2, 4, 16)

    def test_concat_width(self, rng, tiny_model):
        config = ModelConfig(**{**tiny_model, 'fusion': 'concat'})
        centers, patches = _batch(rng, config)
        assert encode(centers, patches, init_weights(config, rng).encoder, config).shape == (2, 4, 32)


class TestForward:
    def test_logits_shape_and_determinism(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        weights = init_weights(config, rng)
        cloud = PointCloud(rng.standard_normal((100, 3)))
        a = forward(cloud, weights, config, seed=3)
        b = forward(cloud, weights, config, seed=3)
        assert a.shape == (4,)
        assert a.data.tobytes() == b.data.tobytes()

    def test_batch_matches_single(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        weights = init_weights(config, rng)
        clouds = [PointCloud(rng.standard_normal((80, 3))) for _ in range(3)]
        sets = [patch_cloud(c, config, seed=i) for i, c in enumerate(clouds)]
        batched = forward_batch(np.stack([s.ordered_centers() for s in sets]),
                                np.stack([s.ordered_patches() for s in sets]), weights, config).data
        for i, cloud in enumerate(clouds):
            np.testing.assert_allclose(forward(cloud, weights, config, seed=i).data, batched[i], atol=1e-10)

    def test_too_few_points(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        with pytest.raises(ValueError):
            forward(PointCloud(rng.standard_normal((3, 3))), init_weights(config, rng), config)

    def test_needs_head(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        centers, patches = _batch(rng, config)
        with pytest.raises(ValueError):
            forward_batch(centers, patches, init_weights(config, rng, head=False), config)

    def test_initial_loss_near_uniform(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        centers, patches = _batch(rng, config, batch=8)
        loss, logits = classification_loss(centers, patches, np.arange(8) % 4,
                                           init_weights(config, rng), config)
        assert logits.shape == (8, 4)
        assert loss.item() == pytest.approx(np.log(4.0), rel=0.05)

    def test_loss_gradients(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        weights = init_weights(config, rng)
        centers, patches = _batch(rng, config)
        labels = np.array([1, 3])

        def loss(_):
            return classification_loss(centers, patches, labels, weights, config, training=False)[0]

        params = dict(weights.named_parameters())
        for name in ('head.fc1.weight', 'encoder.norm.gain', 'encoder.bissm.1.backward.a_log',
                     'encoder.transformer.0.w_k', 'encoder.pos_embed.fc2.weight'):
            assert grad_check(loss, params[name], coords=6, seed=5) < 1e-5, name

    def test_dropout_only_in_training(self, rng, tiny_model):
        config = ModelConfig(**{**tiny_model, 'dropout': 0.5})
        weights = init_weights(config, rng)
        centers, patches = _batch(rng, config)
        a = forward_batch(centers, patches, weights, config).data
        b = forward_batch(centers, patches, weights, config).data
        c = forward_batch(centers, patches, weights, config, training=True,
                          rng=np.random.default_rng(0)).data
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)


class TestMasking:
    def test_counts(self):
        assert mask_counts(64, 0.6) == (26, 38)
        assert mask_counts(4, 0.5) == (2, 2)

    @pytest.mark.parametrize('ratio', [0.0, 1.0, 0.1])
    def test_degenerate_ratios(self, ratio):
        with pytest.raises(ValueError):
            mask_counts(4, ratio)

    def test_indices_partition(self, rng):
        visible, masked = mask_indices(10, 0.6, rng)
        assert len(masked) == 6
        assert sorted(np.concatenate([visible, masked])) == list(range(10))
        assert list(visible) == sorted(visible)

    def test_mae_mask_keeps_order(self, rng):
        tokens = np.arange(20.0).reshape(10, 2)
        visible_tokens, masked = mae_mask(tokens, np.zeros((10, 3)), 0.6, rng)
        assert visible_tokens.shape == (4, 2)
        assert np.all(np.diff(visible_tokens.data[:, 0]) > 0)
        assert not set(visible_tokens.data[:, 0] // 2) & set(masked)

    def test_mae_mask_center_mismatch(self, rng):
        with pytest.raises(ShapeError):
            mae_mask(np.zeros((5, 2)), np.zeros((4, 3)), 0.5, rng)


class TestChamfer:
    def test_identical_sets(self, rng):
        p = rng.standard_normal((6, 3))
        assert chamfer(p, p[::-1]) == 0.0

    def test_known_value(self):
        assert chamfer([[0, 0, 0]], [[1, 0, 0], [2, 0, 0]]) == pytest.approx(1.0 + 2.5)

    def test_symmetric(self, rng):
        p, q = rng.standard_normal((5, 3)), rng.standard_normal((7, 3))
        assert chamfer(p, q) == pytest.approx(chamfer(q, p))

    def test_matches_double_loop(self, rng):
        for a, b in ((1, 1), (4, 9), (12, 5)):
            p, q = rng.standard_normal((a, 3)), rng.standard_normal((b, 3))
            forward = np.mean([min(float(((x - y) ** 2).sum()) for y in q) for x in p])
            backward = np.mean([min(float(((y - x) ** 2).sum()) for x in p) for y in q])
            assert chamfer(p, q) == pytest.approx(forward + backward, rel=1e-12, abs=1e-12)

    def test_batched_is_mean_of_sets(self, rng):
        p, q = rng.standard_normal((3, 5, 3)), rng.standard_normal((3, 4, 3))
        expected = np.mean([chamfer(p[i], q[i]) for i in range(3)])
        assert chamfer_loss(Tensor(p), Tensor(q)).item() == pytest.approx(expected)

    def test_empty_set(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


class TestMaeLoss:
    def test_finite_and_reaches_decoder(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        weights = init_weights(config, rng, head=False, decoder=True)
        centers, patches = _batch(rng, config)
        loss = mae_loss(centers, patches, weights, config, np.random.default_rng(0))
        assert np.isfinite(loss.item()) and loss.item() > 0.0
        loss.backward()
        assert weights.decoder.mask_token.grad is not None
        assert np.abs(weights.encoder.patch_embed.fc1.weight.grad).sum() > 0.0

    def test_same_rng_same_loss(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        weights = init_weights(config, rng, head=False, decoder=True)
        centers, patches = _batch(rng, config)
        a = mae_loss(centers, patches, weights, config, np.random.default_rng(9)).item()
        b = mae_loss(centers, patches, weights, config, np.random.default_rng(9)).item()
        assert a == b

    def test_needs_decoder(self, rng, tiny_model):
        config = ModelConfig(**tiny_model)
        centers, patches = _batch(rng, config)
        with pytest.raises(ValueError):
            mae_loss(centers, patches, init_weights(config, rng), config, rng)

    def test_encoder_names_shared_with_classifier(self, tiny_model):
        config = ModelConfig(**tiny_model)
        pretrain = {n for n, _ in init_weights(config, head=False, decoder=True).named_parameters()}
        classify = {n for n, _ in init_weights(config).named_parameters()}
        encoder = {n for n in classify if n.startswith('encoder.')}
        assert encoder and encoder <= pretrain
