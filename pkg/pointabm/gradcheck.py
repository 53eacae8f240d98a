"""
Gradient verification against central finite differences.
"""

import logging
from typing import Callable, Optional

import numpy as np

from pointabm.numeric import ShapeError, Tensor, no_grad

logger = logging.getLogger(__name__)

MIN_EPS = 1e-7
MAX_EPS = 1e-3


def _scalar(value: Tensor, where: str) -> float:
    if value.size != 1:
        raise ShapeError(f'grad_check needs a scalar-valued function, got shape {value.shape}')
    result = float(value.data.reshape(()))
    if not np.isfinite(result):
        raise ValueError(f'function is non-finite at {where}')
    return result


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Optional[int] = None,
    seed: int = 0
) -> float:
    """
    Compare the tape gradient of `f` at `x` with central differences.

    `x` is perturbed in place (its `.data` is swapped and restored), so `f`
    may also reach `x` through closures, e.g. a model parameter.

    Args:
        f: Scalar-valued function of x
        x: Point of evaluation
        eps: Perturbation, within [1e-7, 1e-3]
        coords: Check only this many coordinates, chosen with `seed`
        seed: RNG seed for the coordinate subset

    Returns:
        max over checked coordinates of |analytic - numeric| / max(1, |numeric|)
    """
    if not MIN_EPS <= eps <= MAX_EPS:
        raise ValueError(f'eps {eps} outside [{MIN_EPS}, {MAX_EPS}]')

    previous_flag = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    _scalar(out, 'x')
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = previous_flag

    if coords is None or coords >= x.size:
        indices = np.arange(x.size)
    else:
        indices = np.sort(np.random.default_rng(seed).choice(x.size, size=coords, replace=False))

    base = x.data
    worst = 0.0
    try:
        with no_grad():
            for flat_index in indices:
                bumped = base.copy()
                bumped.flat[flat_index] += eps
                x.data = bumped
                plus = _scalar(f(x), f'x + eps at coordinate {flat_index}')
                bumped = base.copy()
                bumped.flat[flat_index] -= eps
                x.data = bumped
                minus = _scalar(f(x), f'x - eps at coordinate {flat_index}')
                numeric = (plus - minus) / (2.0 * eps)
                error = abs(analytic.flat[flat_index] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, error)
    finally:
        x.data = base

    logger.debug(f'grad_check {x.name or x.shape}: {len(indices)} coords, max rel err {worst:.3e}')
    return worst
