"""
Run configuration.

A flat document mirroring RunConfig field for field. Values are layered,
lowest precedence first:

    1. built-in defaults
    2. PABM_SEED from the environment (or a .env file), seed only
    3. the JSON file given by --config
    4. command-line flags and --set key=value overrides
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional

from dotenv import find_dotenv, load_dotenv

from pointabm.data import SHAPE_KINDS
from pointabm.model import ModelConfig
from pointabm.pointops import AugmentationSpec
from pointabm.training import TrainingConfig
from pointabm.utils import canonical_json
from pointabm.validation import ConfigError, ValidationResult, validate_run_config

logger = logging.getLogger(__name__)

SEED_ENV_VAR = 'PABM_SEED'


@dataclass
class RunConfig:
    """Every knob of a run: architecture, optimization, data and outputs."""
    # Model
    points_per_cloud: int = 1024
    n_patches: int = 64
    patch_size: int = 32
    width: int = 384
    transformer_layers: int = 1
    heads: int = 8
    bissm_layers: int = 12
    fusion: str = 'residual'
    ffn_ratio: int = 4
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    dt_rank: int = 0
    ssm_direction: str = 'bidirectional'
    serialization: str = 'xyz'
    pre_norm: bool = True
    embed_hidden: int = 128
    pos_hidden: int = 128
    head_hidden: int = 256
    dropout: float = 0.5
    num_classes: int = 6
    mask_ratio: float = 0.6
    decoder_layers: int = 4

    # Training
    epochs: int = 300
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    save_every: int = 0
    augment_scale: bool = False
    augment_translate: bool = False
    augment_rotate: bool = False

    # Data
    dataset: str = 'synthetic'
    kinds: List[str] = field(default_factory=lambda: list(SHAPE_KINDS))
    n_per_class: int = 50
    n_points: int = 1024
    noise: float = 0.01
    split_seed: int = 0
    train_fraction: float = 0.8
    train_manifest: str = ''
    test_manifest: str = ''

    # Output
    out: str = 'run'
    init: str = ''

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.to_dict())

    def augmentation(self) -> AugmentationSpec:
        return AugmentationSpec(
            scale=self.augment_scale,
            translate=self.augment_translate,
            rotate=self.augment_rotate,
        )

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            augmentation=self.augmentation(),
        )


def parse_override(text: str) -> tuple:
    """
    Parse one "key=value" override; the value is read as JSON when possible
    and kept as a string otherwise.

    Raises:
        ConfigError: if there is no '='
    """
    key, sep, raw = text.partition('=')
    if not sep or not key.strip():
        result = ValidationResult()
        result.add_error(text, 'Overrides must look like key=value', 'syntax', 'general')
        raise ConfigError(result)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _env_seed(result: ValidationResult) -> Optional[int]:
    load_dotenv(find_dotenv(usecwd=True), override=False)
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw == '':
        return None
    try:
        return int(raw)
    except ValueError:
        result.add_error(SEED_ENV_VAR, f'{SEED_ENV_VAR} must be an integer, got {raw!r}', 'type', 'training')
        return None


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Read a JSON configuration document.

    Raises:
        ConfigError: unparsable JSON or a non-object document
        OSError: if the file cannot be read
    """
    with open(path, 'r', encoding='utf-8') as handle:
        text = handle.read()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        result = ValidationResult()
        result.add_error('', f'{path}: invalid JSON ({exc.msg} at line {exc.lineno})', 'syntax', 'general')
        raise ConfigError(result) from None
    if not isinstance(document, dict):
        result = ValidationResult()
        result.add_error('', f'{path}: configuration must be a JSON object', 'type', 'general')
        raise ConfigError(result)
    return document


def build_run_config(
    document: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    use_env: bool = True
) -> RunConfig:
    """
    Layer defaults, environment, document and overrides, then validate.

    Raises:
        ConfigError: carrying every validation problem found
    """
    result = ValidationResult()
    payload = RunConfig().to_dict()
    if use_env:
        seed = _env_seed(result)
        if seed is not None:
            payload['seed'] = seed
    payload.update(document or {})
    payload.update(overrides or {})

    checked = validate_run_config(payload, RunConfig.field_names())
    result.errors.extend(checked.errors)
    result.warnings.extend(checked.warnings)
    result.is_valid = result.is_valid and checked.is_valid
    if not result.is_valid:
        logger.debug(f'configuration rejected: {len(result.errors)} error(s)')
        raise ConfigError(result)
    for warning in result.warnings:
        logger.warning(f'config {warning.field}: {warning.message}')

    payload['kinds'] = list(payload['kinds'])
    return RunConfig(**payload)


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                    use_env: bool = True) -> RunConfig:
    document = read_config_file(path) if path else None
    return build_run_config(document, overrides, use_env)


def save_run_config(config: RunConfig, path: str) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(config.to_json())
