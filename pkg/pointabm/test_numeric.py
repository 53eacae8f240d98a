"""
Unit tests for the tensor tape.
"""

import threading

import numpy as np
import pytest

from pointabm.gradcheck import grad_check
from pointabm.numeric import (
    ShapeError, Tensor, concat, cross_entropy, dropout, is_grad_enabled, layer_norm,
    log_softmax, matmul, no_grad, pad, parameter, softmax, softmax_rows, stack
)


def _param(rng, *shape):
    return parameter(rng.standard_normal(shape))


class TestTape:
    def test_scalar_chain_rule(self):
        x = parameter(3.0)
        y = x * x + 2.0 * x
        y.backward()
        assert x.grad == pytest.approx(8.0)

    def test_gradients_accumulate_over_reused_nodes(self):
        x = parameter(np.array([1.0, 2.0]))
        y = x * x
        z = (y + y).sum()
        z.backward()
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_graph_is_freed_after_backward(self):
        x = parameter(np.ones(3))
        h = x * 2.0
        out = h.sum()
        out.backward()
        assert h._parents == ()
        assert h.grad is None
        np.testing.assert_allclose(x.grad, 2.0)

    def test_backward_needs_scalar_without_gradient(self):
        x = parameter(np.ones(3))
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_constants_do_not_record(self):
        a = Tensor(np.ones(2))
        out = a * 3.0
        assert out.requires_grad is False
        assert out._parents == ()

    def test_no_grad_disables_recording(self):
        x = parameter(np.ones(2))
        with no_grad():
            y = x * 2.0
            assert is_grad_enabled() is False
        assert is_grad_enabled() is True
        assert y.requires_grad is False

    def test_no_grad_is_thread_local(self):
        seen = []

        def worker():
            seen.append(is_grad_enabled())

        with no_grad():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen == [True]

    def test_numpy_left_operand_defers_to_tensor(self):
        x = parameter(np.ones(2))
        out = np.array([2.0, 3.0]) * x
        assert isinstance(out, Tensor)
        out.sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 3.0])

    def test_item_requires_single_element(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(2)).item()


class TestBroadcastAndIndexing:
    def test_broadcast_gradient_is_summed(self):
        a = parameter(np.ones((3, 4)))
        b = parameter(np.ones(4))
        (a * b).sum().backward()
        np.testing.assert_allclose(b.grad, np.full(4, 3.0))

    def test_fancy_index_repeats_accumulate(self):
        x = parameter(np.arange(4.0))
        x[np.array([1, 1, 3])].sum().backward()
        np.testing.assert_allclose(x.grad, [0.0, 2.0, 0.0, 1.0])

    def test_max_routes_gradient_to_first_maximum(self):
        x = parameter(np.array([[1.0, 5.0, 5.0], [2.0, 0.0, 1.0]]))
        x.max(axis=1).sum().backward()
        np.testing.assert_allclose(x.grad, [[0, 1, 0], [1, 0, 0]])

    def test_matmul_shape_errors(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            matmul(np.ones(3), np.ones((3, 2)))

    def test_concat_and_stack_split_gradients(self):
        a = parameter(np.ones((2, 1)))
        b = parameter(np.ones((2, 2)))
        (concat([a, b], axis=1) * np.array([1.0, 2.0, 3.0])).sum().backward()
        np.testing.assert_allclose(a.grad, [[1.0], [1.0]])
        np.testing.assert_allclose(b.grad, [[2.0, 3.0], [2.0, 3.0]])

        c = parameter(np.ones(3))
        d = parameter(np.ones(3))
        (stack([c, d]) * np.array([[1.0], [4.0]])).sum().backward()
        np.testing.assert_allclose(d.grad, np.full(3, 4.0))

    def test_pad_gradient_drops_padding(self):
        x = parameter(np.ones((1, 2)))
        out = pad(x, [(0, 0), (2, 0)])
        assert out.shape == (1, 4)
        (out * np.arange(4.0)).sum().backward()
        np.testing.assert_allclose(x.grad, [[2.0, 3.0]])


class TestSoftmax:
    def test_rows_sum_to_one(self):
        m = Tensor(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]]))
        out = softmax_rows(m).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0)
        np.testing.assert_allclose(out[1], 1.0 / 3.0)

    def test_rejects_non_finite_with_index(self):
        m = Tensor(np.array([[0.0, 1.0], [np.nan, 0.0]]))
        with pytest.raises(ValueError, match=r'\(1, 0\)'):
            softmax_rows(m)

    def test_requires_rank_two(self):
        with pytest.raises(ShapeError):
            softmax_rows(Tensor(np.ones(3)))

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = Tensor(rng.standard_normal((4, 5)))
        np.testing.assert_allclose(log_softmax(x).data, np.log(softmax(x).data), atol=1e-12)

    def test_softmax_gradient(self, rng):
        x = _param(rng, 3, 4)
        weights = rng.standard_normal((3, 4))
        assert grad_check(lambda t: (softmax(t) * weights).sum(), x) < 1e-6


class TestLayerNorm:
    def test_normalizes_last_axis(self, rng):
        x = Tensor(rng.standard_normal((5, 8)) * 3.0 + 2.0)
        out = layer_norm(x).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)

    def test_constant_row_maps_to_zero(self):
        out = layer_norm(Tensor(np.full((1, 4), 7.0))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, 0.0)

    def test_affine_shape_checked(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.ones((2, 3))), gain=Tensor(np.ones(4)))

    def test_gradients_match_finite_differences(self, rng):
        x = _param(rng, 3, 6)
        gain = _param(rng, 6)
        bias = _param(rng, 6)
        weights = rng.standard_normal((3, 6))

        def loss(_):
            return (layer_norm(x, gain, bias) * weights).sum()

        assert grad_check(loss, x) < 1e-6
        assert grad_check(loss, gain) < 1e-6
        assert grad_check(loss, bias) < 1e-6


class TestElementwiseGradients:
    @pytest.mark.parametrize('op', ['exp', 'tanh', 'silu', 'gelu', 'softplus'])
    def test_unary(self, rng, op):
        x = _param(rng, 2, 5)
        assert grad_check(lambda t: getattr(t, op)().sum(), x) < 1e-6

    def test_log_and_division(self, rng):
        x = parameter(rng.uniform(0.5, 2.0, size=(3, 3)))
        assert grad_check(lambda t: (t.log() / (t + 1.0)).sum(), x) < 1e-6

    def test_reshape_transpose_flip(self, rng):
        x = _param(rng, 2, 3, 4)
        weights = rng.standard_normal((4, 6))

        def f(t):
            return (t.transpose(0, 2, 1).flip(1).reshape(2, 4, 3).swapaxes(1, 2).reshape(6, 4).transpose()
                    * weights).sum()

        assert grad_check(f, x) < 1e-6


class TestLosses:
    def test_cross_entropy_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 2]))
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_cross_entropy_gradient(self, rng):
        x = _param(rng, 4, 3)
        labels = np.array([0, 2, 1, 2])
        assert grad_check(lambda t: cross_entropy(t, labels), x) < 1e-6

    def test_cross_entropy_shape_check(self):
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1]))

    def test_dropout_is_identity_in_eval(self, rng):
        x = Tensor(np.ones(10))
        assert dropout(x, 0.5, None, training=False) is x

    def test_dropout_keeps_expectation(self, rng):
        out = dropout(Tensor(np.ones(20000)), 0.5, rng, training=True).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert out.mean() == pytest.approx(1.0, abs=0.05)

    def test_dropout_training_needs_rng(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 0.5, None, training=True)
