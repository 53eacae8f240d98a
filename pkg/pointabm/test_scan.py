"""
Unit tests for the selective scan kernel.
"""

import numpy as np
import pytest

from pointabm.gradcheck import grad_check
from pointabm.numeric import ShapeError, parameter
from pointabm.scan import selective_scan, selective_scan_naive


def _inputs(rng, batch=2, length=5, d_inner=3, d_state=4):
    return {
        'u': rng.standard_normal((batch, length, d_inner)),
        'delta': rng.uniform(0.01, 0.5, size=(batch, length, d_inner)),
        'A': -rng.uniform(0.5, 2.0, size=(d_inner, d_state)),
        'B': rng.standard_normal((batch, length, d_state)),
        'C': rng.standard_normal((batch, length, d_state)),
        'D': rng.standard_normal(d_inner),
    }


class TestSelectiveScanForward:
    def test_matches_naive_oracle(self, rng):
        args = _inputs(rng)
        np.testing.assert_allclose(selective_scan(**args).data, selective_scan_naive(**args),
                                   rtol=0, atol=1e-10)

    def test_matches_naive_oracle_over_random_sizes(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            args = _inputs(rng, batch=int(rng.integers(1, 3)), length=int(rng.integers(1, 65)),
                           d_inner=int(rng.integers(1, 33)), d_state=int(rng.integers(1, 17)))
            diff = np.abs(selective_scan(**args).data - selective_scan_naive(**args)).max()
            worst = max(worst, float(diff))
        assert worst < 1e-10

    def test_single_step(self, rng):
        args = _inputs(rng, length=1)
        y = selective_scan(**args).data
        expected = (args['delta'][..., None] * args['B'][:, :, None, :] * args['u'][..., None]
                    * args['C'][:, :, None, :]).sum(-1) + args['u'] * args['D']
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_causal(self, rng):
        args = _inputs(rng, length=6)
        base = selective_scan(**args).data
        args['u'] = args['u'].copy()
        args['u'][:, 4:] += 1.0
        changed = selective_scan(**args).data
        np.testing.assert_allclose(base[:, :4], changed[:, :4], rtol=0, atol=1e-14)
        assert not np.allclose(base[:, 4:], changed[:, 4:])

    def test_zero_step_reduces_to_skip(self, rng):
        args = _inputs(rng)
        args['delta'] = np.zeros_like(args['delta'])
        np.testing.assert_allclose(selective_scan(**args).data, args['u'] * args['D'])

    def test_bounded_for_negative_a(self, rng):
        args = _inputs(rng, length=200)
        args['u'] = np.ones_like(args['u'])
        assert np.all(np.isfinite(selective_scan(**args).data))

    def test_empty_sequence(self, rng):
        args = _inputs(rng, length=1)
        args['u'] = np.zeros((2, 0, 3))
        args['delta'] = np.zeros((2, 0, 3))
        args['B'] = np.zeros((2, 0, 4))
        args['C'] = np.zeros((2, 0, 4))
        with pytest.raises(ShapeError, match='L = 0'):
            selective_scan(**args)

    def test_shape_mismatch(self, rng):
        args = _inputs(rng)
        args['D'] = np.ones(5)
        with pytest.raises(ShapeError):
            selective_scan(**args)
        with pytest.raises(ShapeError):
            selective_scan_naive(**args)


class TestSelectiveScanBackward:
    @pytest.mark.parametrize('name', ['u', 'delta', 'A', 'B', 'C', 'D'])
    def test_gradient_matches_finite_differences(self, rng, name):
        args = {k: parameter(v) for k, v in _inputs(rng, length=4).items()}
        weights = rng.standard_normal((2, 4, 3))

        def loss(_):
            return (selective_scan(**args) * weights).sum()

        assert grad_check(loss, args[name]) < 1e-6

    def test_constant_inputs_record_nothing(self, rng):
        out = selective_scan(**_inputs(rng))
        assert out.requires_grad is False
