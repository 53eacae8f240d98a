"""
Strict validation for run configuration documents.

Validation Rules Documentation:
===============================

1. KEYS
   - The document must be a JSON object
   - Every key must be a RunConfig field; unknown keys are rejected

2. MODEL (section "model")
   - points_per_cloud, n_patches, patch_size, width, heads, ffn_ratio,
     d_state, expand, conv_width, embed_hidden, pos_hidden, head_hidden,
     num_classes: integers >= 1
   - transformer_layers, bissm_layers, decoder_layers, dt_rank: integers >= 0
   - fusion: residual | concat
   - ssm_direction: bidirectional | forward
   - serialization: xyz | yzx | zxy | fps
   - pre_norm: boolean
   - dropout: number in [0, 1)
   - mask_ratio: number strictly inside (0, 1)

3. TRAINING (section "training")
   - epochs, save_every: integers >= 0
   - batch_size: integer >= 1
   - lr_max, lr_min, weight_decay: numbers >= 0
   - beta1, beta2: numbers in [0, 1)
   - epsilon: number > 0
   - seed: integer >= 0
   - augment_scale, augment_translate, augment_rotate: booleans

4. DATA (section "data")
   - dataset: synthetic | manifest
   - n_per_class: integer >= 2; n_points: integer >= 8
   - kinds: non-empty list of distinct shape kinds
   - noise: number >= 0; split_seed: integer >= 0
   - train_fraction: number strictly inside (0, 1)
   - train_manifest, test_manifest: strings

5. OUTPUT (section "output")
   - out, init: strings

Cross-Section Validation Rules:
===============================
- width must be divisible by heads
- n_patches and patch_size must not exceed points_per_cloud
- mask_ratio must leave at least one visible and one masked patch
- lr_min must not exceed lr_max
- synthetic datasets: number of kinds must equal num_classes
- manifest datasets: both manifests are required
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from pointabm.data import SHAPE_KINDS
from pointabm.pointops import SERIALIZATION_STRATEGIES


@dataclass
class ValidationError:
    """A single validation problem with its field path."""
    field: str
    message: str
    code: str
    section: str = ''


@dataclass
class ValidationResult:
    """Container for validation results."""
    errors: List[ValidationError] = field(default_factory=list)
    is_valid: bool = True
    warnings: List[ValidationError] = field(default_factory=list)  # Non-blocking issues

    def add_error(self, field: str, message: str, code: str = 'invalid', section: str = ''):
        """Add a validation error."""
        self.errors.append(ValidationError(field, message, code, section))
        self.is_valid = False

    def add_warning(self, field: str, message: str, code: str = 'warning', section: str = ''):
        """Add a non-blocking warning."""
        self.warnings.append(ValidationError(field, message, code, section))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON output."""
        return {
            'ok': self.is_valid,
            'errors': [
                {'field': e.field, 'message': e.message, 'code': e.code, 'section': e.section}
                for e in self.errors
            ],
            'warnings': [
                {'field': w.field, 'message': w.message, 'code': w.code, 'section': w.section}
                for w in self.warnings
            ]
        }

    def summary(self) -> str:
        """One line per error, 'field: message'."""
        return '\n'.join(f'{e.field or "<document>"}: {e.message}' for e in self.errors)


class ConfigError(ValueError):
    """A configuration document failed validation."""

    def __init__(self, result: ValidationResult):
        super().__init__(result.summary() or 'invalid configuration')
        self.result = result


FUSION_MODES = ['residual', 'concat']
SSM_DIRECTIONS = ['bidirectional', 'forward']
DATASET_KINDS = ['synthetic', 'manifest']


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_integer(value: Any, field_name: str, result: ValidationResult,
                     minimum: Optional[int] = None, section: str = '') -> bool:
    """Validate an integer field with an optional lower bound."""
    if not _is_int(value):
        result.add_error(field_name, f'Must be an integer, got {value!r}', 'type', section)
        return False
    if minimum is not None and value < minimum:
        result.add_error(field_name, f'Must be at least {minimum}, got {value}', 'range', section)
        return False
    return True


def validate_number(value: Any, field_name: str, result: ValidationResult,
                    minimum: Optional[float] = None, maximum: Optional[float] = None,
                    exclusive_min: bool = False, exclusive_max: bool = False,
                    section: str = '') -> bool:
    """Validate a finite number within optional bounds."""
    if not _is_number(value) or not math.isfinite(value):
        result.add_error(field_name, f'Must be a finite number, got {value!r}', 'type', section)
        return False
    if minimum is not None and (value < minimum or (exclusive_min and value == minimum)):
        bound = 'greater than' if exclusive_min else 'at least'
        result.add_error(field_name, f'Must be {bound} {minimum}, got {value}', 'range', section)
        return False
    if maximum is not None and (value > maximum or (exclusive_max and value == maximum)):
        bound = 'less than' if exclusive_max else 'at most'
        result.add_error(field_name, f'Must be {bound} {maximum}, got {value}', 'range', section)
        return False
    return True


def validate_boolean(value: Any, field_name: str, result: ValidationResult, section: str = '') -> bool:
    """Validate a boolean field with strict type checking."""
    if not isinstance(value, bool):
        result.add_error(field_name, f'Must be true or false, got {value!r}', 'type', section)
        return False
    return True


def validate_string(value: Any, field_name: str, result: ValidationResult, section: str = '') -> bool:
    if not isinstance(value, str):
        result.add_error(field_name, f'Must be a string, got {value!r}', 'type', section)
        return False
    return True


def validate_enum(value: Any, field_name: str, allowed: Sequence[str],
                  result: ValidationResult, section: str = '') -> bool:
    """Validate that value is one of the allowed strings."""
    if value not in allowed:
        result.add_error(field_name, f'Must be one of: {", ".join(allowed)}; got {value!r}',
                         'enum', section)
        return False
    return True


POSITIVE_MODEL_INTS = [
    'points_per_cloud', 'n_patches', 'patch_size', 'width', 'heads', 'ffn_ratio', 'd_state',
    'expand', 'conv_width', 'embed_hidden', 'pos_hidden', 'head_hidden', 'num_classes',
]
NON_NEGATIVE_MODEL_INTS = ['transformer_layers', 'bissm_layers', 'decoder_layers', 'dt_rank']


def validate_run_config(payload: Dict[str, Any], known_fields: Sequence[str]) -> ValidationResult:
    """
    Main validation entry point for a merged run configuration.

    Args:
        payload: The flat configuration document
        known_fields: Every accepted key

    Returns:
        ValidationResult with every problem found
    """
    result = ValidationResult()

    if not isinstance(payload, dict):
        result.add_error('', 'Configuration must be a JSON object', 'type', 'general')
        return result

    for key in sorted(set(payload) - set(known_fields)):
        result.add_error(key, f'Unknown configuration key {key!r}', 'unknown_key', 'general')

    _validate_model(payload, result)
    _validate_training(payload, result)
    _validate_data(payload, result)
    _validate_output(payload, result)

    # Cross-field rules only run on fields that individually passed
    if result.is_valid:
        _validate_cross_field_logic(payload, result)
    return result


def _validate_model(payload: Dict[str, Any], result: ValidationResult):
    section = 'model'
    for name in POSITIVE_MODEL_INTS:
        validate_integer(payload.get(name), name, result, minimum=1, section=section)
    for name in NON_NEGATIVE_MODEL_INTS:
        validate_integer(payload.get(name), name, result, minimum=0, section=section)
    validate_enum(payload.get('fusion'), 'fusion', FUSION_MODES, result, section)
    validate_enum(payload.get('ssm_direction'), 'ssm_direction', SSM_DIRECTIONS, result, section)
    validate_enum(payload.get('serialization'), 'serialization',
                  list(SERIALIZATION_STRATEGIES), result, section)
    validate_boolean(payload.get('pre_norm'), 'pre_norm', result, section)
    validate_number(payload.get('dropout'), 'dropout', result, minimum=0.0, maximum=1.0,
                    exclusive_max=True, section=section)
    validate_number(payload.get('mask_ratio'), 'mask_ratio', result, minimum=0.0, maximum=1.0,
                    exclusive_min=True, exclusive_max=True, section=section)


def _validate_training(payload: Dict[str, Any], result: ValidationResult):
    section = 'training'
    validate_integer(payload.get('epochs'), 'epochs', result, minimum=0, section=section)
    validate_integer(payload.get('save_every'), 'save_every', result, minimum=0, section=section)
    validate_integer(payload.get('batch_size'), 'batch_size', result, minimum=1, section=section)
    validate_integer(payload.get('seed'), 'seed', result, minimum=0, section=section)
    for name in ('lr_max', 'lr_min', 'weight_decay'):
        validate_number(payload.get(name), name, result, minimum=0.0, section=section)
    for name in ('beta1', 'beta2'):
        validate_number(payload.get(name), name, result, minimum=0.0, maximum=1.0,
                        exclusive_max=True, section=section)
    validate_number(payload.get('epsilon'), 'epsilon', result, minimum=0.0,
                    exclusive_min=True, section=section)
    for name in ('augment_scale', 'augment_translate', 'augment_rotate'):
        validate_boolean(payload.get(name), name, result, section)


def _validate_data(payload: Dict[str, Any], result: ValidationResult):
    section = 'data'
    validate_enum(payload.get('dataset'), 'dataset', DATASET_KINDS, result, section)
    validate_integer(payload.get('n_per_class'), 'n_per_class', result, minimum=2, section=section)
    validate_integer(payload.get('n_points'), 'n_points', result, minimum=8, section=section)
    validate_integer(payload.get('split_seed'), 'split_seed', result, minimum=0, section=section)
    validate_number(payload.get('noise'), 'noise', result, minimum=0.0, section=section)
    validate_number(payload.get('train_fraction'), 'train_fraction', result, minimum=0.0,
                    maximum=1.0, exclusive_min=True, exclusive_max=True, section=section)
    validate_string(payload.get('train_manifest'), 'train_manifest', result, section)
    validate_string(payload.get('test_manifest'), 'test_manifest', result, section)

    kinds = payload.get('kinds')
    if not isinstance(kinds, list) or not kinds:
        result.add_error('kinds', 'Must be a non-empty list of shape kinds', 'type', section)
        return
    for i, kind in enumerate(kinds):
        validate_enum(kind, f'kinds[{i}]', list(SHAPE_KINDS), result, section)
    if len(set(map(str, kinds))) != len(kinds):
        result.add_error('kinds', 'Shape kinds must be distinct', 'duplicate', section)


def _validate_output(payload: Dict[str, Any], result: ValidationResult):
    validate_string(payload.get('out'), 'out', result, 'output')
    validate_string(payload.get('init'), 'init', result, 'output')


def _validate_cross_field_logic(payload: Dict[str, Any], result: ValidationResult):
    """Rules spanning more than one field."""
    if payload['width'] % payload['heads']:
        result.add_error('heads', f'width {payload["width"]} is not divisible by '
                         f'{payload["heads"]} heads', 'cross_field', 'model')

    for name in ('n_patches', 'patch_size'):
        if payload[name] > payload['points_per_cloud']:
            result.add_error(name, f'{name} {payload[name]} exceeds points_per_cloud '
                             f'{payload["points_per_cloud"]}', 'cross_field', 'model')

    n = payload['n_patches']
    masked = math.floor(payload['mask_ratio'] * n)
    if masked == 0 or masked == n:
        result.add_error('mask_ratio', f'mask_ratio {payload["mask_ratio"]} over {n} patches leaves '
                         f'{n - masked} visible and {masked} masked', 'cross_field', 'model')

    if payload['lr_min'] > payload['lr_max']:
        result.add_error('lr_min', f'lr_min {payload["lr_min"]} exceeds lr_max {payload["lr_max"]}',
                         'cross_field', 'training')

    if payload['dataset'] == 'synthetic':
        if len(payload['kinds']) != payload['num_classes']:
            result.add_error('kinds', f'{len(payload["kinds"])} kinds for num_classes '
                             f'{payload["num_classes"]}', 'cross_field', 'data')
        if payload['n_points'] < payload['n_patches']:
            result.add_error('n_points', f'n_points {payload["n_points"]} is below n_patches '
                             f'{n}', 'cross_field', 'data')
    else:
        for name in ('train_manifest', 'test_manifest'):
            if not payload[name]:
                result.add_error(name, 'Required when dataset is "manifest"', 'required', 'data')

    if payload['fusion'] == 'concat' and payload['transformer_layers'] == 0:
        result.add_warning('fusion', 'concat fusion has no effect without Transformer layers',
                           'ignored', 'model')
