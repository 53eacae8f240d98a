"""
Unit tests for AdamW and the cosine schedule.
"""

import math

import numpy as np
import pytest

from pointabm.numeric import ShapeError
from pointabm.optim import OptimizerState, adamw_step, cosine_lr


def _state(params, **kwargs):
    return OptimizerState.for_params(params, **kwargs)


class TestAdamW:
    def test_first_step_moves_by_lr_against_gradient_sign(self):
        params = {'w': np.array([1.0, -1.0])}
        grads = {'w': np.array([0.5, -2.0])}
        new, state = adamw_step(params, grads, _state(params, weight_decay=0.0), lr=0.1)
        np.testing.assert_allclose(new['w'], [0.9, -0.9], atol=1e-6)
        assert state.step == 1

    def test_zero_gradient_only_decays(self):
        params = {'w': np.array([2.0])}
        grads = {'w': np.zeros(1)}
        new, _ = adamw_step(params, grads, _state(params, weight_decay=0.1), lr=0.5)
        np.testing.assert_allclose(new['w'], [2.0 * (1 - 0.05)])

    def test_decay_mask_excludes_parameters(self):
        params = {'w': np.array([2.0]), 'b': np.array([2.0])}
        grads = {'w': np.zeros(1), 'b': np.zeros(1)}
        new, _ = adamw_step(params, grads, _state(params, weight_decay=0.1), lr=0.5,
                            decay_mask={'w': True, 'b': False})
        assert new['w'][0] < 2.0
        assert new['b'][0] == 2.0

    def test_inputs_are_not_mutated(self):
        params = {'w': np.array([1.0, 2.0])}
        grads = {'w': np.array([0.1, 0.2])}
        state = _state(params)
        adamw_step(params, grads, state)
        np.testing.assert_array_equal(params['w'], [1.0, 2.0])
        assert state.step == 0
        np.testing.assert_array_equal(state.first_moment['w'], 0.0)

    def test_deterministic(self):
        params = {'w': np.linspace(-1, 1, 5)}
        grads = {'w': np.sin(np.arange(5.0))}
        a, _ = adamw_step(params, grads, _state(params))
        b, _ = adamw_step(params, grads, _state(params))
        assert a['w'].tobytes() == b['w'].tobytes()

    def test_shape_mismatch(self):
        params = {'w': np.ones(3)}
        with pytest.raises(ShapeError):
            adamw_step(params, {'w': np.ones(2)}, _state(params))

    def test_name_mismatch(self):
        params = {'w': np.ones(3)}
        with pytest.raises(ShapeError):
            adamw_step(params, {'v': np.ones(3)}, _state(params))

    def test_minimizes_quadratic(self):
        params = {'w': np.array([3.0, -4.0])}
        state = _state(params, weight_decay=0.0)
        for _ in range(500):
            params, state = adamw_step(params, {'w': 2.0 * params['w']}, state, lr=0.05)
        assert np.abs(params['w']).max() < 0.05


class TestCosineLr:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 1e-3, 1e-6) == pytest.approx(1e-3)
        assert cosine_lr(100, 100, 1e-3, 1e-6) == pytest.approx(1e-6)

    def test_midpoint(self):
        assert cosine_lr(50, 100, 1.0, 0.0) == pytest.approx(0.5)

    def test_monotone_non_increasing(self):
        values = [cosine_lr(s, 37, 1e-3, 1e-5) for s in range(38)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_matches_formula(self):
        expected = 1e-6 + 0.5 * (1e-3 - 1e-6) * (1 + math.cos(math.pi * 7 / 20))
        assert cosine_lr(7, 20, 1e-3, 1e-6) == pytest.approx(expected)

    def test_zero_total_steps_returns_lr_max(self):
        assert cosine_lr(0, 0, 1e-3, 1e-6) == 1e-3

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 1e-3, 1e-6)
        with pytest.raises(ValueError):
            cosine_lr(0, 10, 1e-6, 1e-3)
