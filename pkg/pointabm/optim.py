"""
Optimizer Module

AdamW with decoupled weight decay and a cosine learning-rate schedule.

Design Decisions:
=================

1. adamw_step is a pure function: it returns new parameter arrays and a new
   OptimizerState and never mutates its inputs. Identical inputs give
   bit-identical outputs.

2. Decay is decoupled: parameters shrink by lr * weight_decay directly,
   before the moment update, and the decay never enters the moments.

3. No warmup. The schedule is cosine decay from lr_max to lr_min.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from pointabm.numeric import ShapeError


DEFAULT_LR_MAX = 1e-3
DEFAULT_LR_MIN = 1e-6
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPSILON = 1e-8
DEFAULT_WEIGHT_DECAY = 0.05


@dataclass
class OptimizerState:
    """AdamW moments and hyperparameters, keyed by parameter name."""
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = DEFAULT_LR_MAX
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    epsilon: float = DEFAULT_EPSILON
    weight_decay: float = DEFAULT_WEIGHT_DECAY

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyperparameters) -> 'OptimizerState':
        """Zero moments shaped like `params`."""
        return cls(
            first_moment={name: np.zeros_like(p) for name, p in params.items()},
            second_moment={name: np.zeros_like(p) for name, p in params.items()},
            **hyperparameters
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            'step': self.step,
            'lr': self.lr,
            'beta1': self.beta1,
            'beta2': self.beta2,
            'epsilon': self.epsilon,
            'weight_decay': self.weight_decay,
        }


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: Optional[float] = None,
    decay_mask: Optional[Mapping[str, bool]] = None
) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    Apply one AdamW update.

    Args:
        params: Parameter arrays by name
        grads: Gradients by name (same names and shapes as params)
        state: Current optimizer state
        lr: Learning rate for this step (defaults to state.lr)
        decay_mask: Optional per-name switch for weight decay (default: all decayed)

    Returns:
        Tuple of (new parameter arrays, new state with step incremented)

    Raises:
        ShapeError: if names or shapes of params, grads and moments disagree
    """
    if set(params) != set(grads) or set(params) != set(state.first_moment):
        missing = set(params) ^ set(grads) | set(params) ^ set(state.first_moment)
        raise ShapeError(f'parameter/gradient/moment names differ: {sorted(missing)}')

    lr = state.lr if lr is None else lr
    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step

    new_params: Dict[str, np.ndarray] = {}
    first: Dict[str, np.ndarray] = {}
    second: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.first_moment[name].shape != p.shape:
            raise ShapeError(
                f'{name}: param {p.shape}, grad {g.shape}, moment {state.first_moment[name].shape}'
            )
        decay = state.weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * (g * g)
        updated = p * (1.0 - lr * decay)
        updated = updated - lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        new_params[name] = updated
        first[name] = m
        second[name] = v

    return new_params, replace(state, step=step, first_moment=first, second_moment=second)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """
    Cosine decay from lr_max at step 0 to lr_min at total_steps.

    Raises:
        ValueError: if step is outside [0, total_steps] or lr_min > lr_max
    """
    if total_steps < 0 or not 0 <= step <= total_steps:
        raise ValueError(f'step {step} outside [0, {total_steps}]')
    if lr_min > lr_max:
        raise ValueError(f'lr_min {lr_min} exceeds lr_max {lr_max}')
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
