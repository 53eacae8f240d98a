"""
Model Assembly Module

End-to-end classifier and masked-autoencoder pretraining objective:

    normalize -> FPS -> k-NN -> resort -> embed + pos_encode
        -> Transformer block(s) -> fuse -> bi-SSM blocks -> norm
        -> [mean-pool || max-pool] -> MLP head

Design Decisions:
=================

1. Fusion operand:
   - The "Transformer embedding" is what the Transformer stack adds to its
     input, T(x') - x'. Residual fusion adds it back (the plain stacked
     output); concat fusion places it beside x' and doubles the width.
   - transformer_layers = 0 skips the Transformer and the fusion step.

2. Shared encoder:
   - Classification and pretraining build the same EncoderWeights, so
     parameter names under "encoder." match between the two and a
     pretrained encoder loads directly into a classifier.

3. Masked autoencoding:
   - Only visible patches go through the encoder. The decoder sees the
     encoded visible tokens plus a learned mask token at each masked
     position (back in serialization order), adds its own positional
     encoding, runs a short bi-SSM stack and regresses s x 3 points per
     masked patch. The loss is the Chamfer distance to the true patch.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from pointabm.blocks import (
    AttentionWeights, EmbedderWeights, LayerNormWeights, Linear, ParameterGroup,
    PosEncWeights, RESIDUAL_INIT_SCALE, SsmParams, bi_ssm_block, embed_patches,
    pos_encode, transformer_block
)
from pointabm.numeric import ShapeError, Tensor, as_tensor, concat, cross_entropy, dropout, parameter
from pointabm.pointops import PatchSet, PointCloud, SERIALIZATION_STRATEGIES, patchify

logger = logging.getLogger(__name__)


class FusionMode(str, Enum):
    RESIDUAL = 'residual'
    CONCAT = 'concat'


class SsmDirection(str, Enum):
    """Bidirectional blocks, or forward-only blocks for the ablation."""
    BIDIRECTIONAL = 'bidirectional'
    FORWARD = 'forward'


@dataclass
class ModelConfig:
    """Architecture hyperparameters."""
    points_per_cloud: int = 1024
    n_patches: int = 64
    patch_size: int = 32
    width: int = 384
    transformer_layers: int = 1
    heads: int = 8
    bissm_layers: int = 12
    fusion: str = FusionMode.RESIDUAL.value
    ffn_ratio: int = 4
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    dt_rank: int = 0                  # 0 = ceil(stream_width / 16)
    ssm_direction: str = SsmDirection.BIDIRECTIONAL.value
    serialization: str = 'xyz'
    pre_norm: bool = True
    embed_hidden: int = 128
    pos_hidden: int = 128
    head_hidden: int = 256
    dropout: float = 0.5
    num_classes: int = 15
    mask_ratio: float = 0.6
    decoder_layers: int = 4

    def __post_init__(self):
        FusionMode(self.fusion)
        SsmDirection(self.ssm_direction)
        if self.serialization not in SERIALIZATION_STRATEGIES:
            raise ValueError(f'unknown serialization strategy {self.serialization!r}')
        if self.heads < 1 or self.width % self.heads:
            raise ShapeError(f'width {self.width} is not divisible by {self.heads} heads')

    @property
    def fuses(self) -> bool:
        return self.transformer_layers > 0

    @property
    def stream_width(self) -> int:
        """Token width seen by the bi-SSM stack."""
        if self.fuses and self.fusion == FusionMode.CONCAT.value:
            return 2 * self.width
        return self.width

    @property
    def resolved_dt_rank(self) -> int:
        return self.dt_rank or math.ceil(self.stream_width / 16)

    @property
    def bidirectional(self) -> bool:
        return self.ssm_direction == SsmDirection.BIDIRECTIONAL.value

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def fuse(transformer_out: Tensor, pre_tokens: Tensor, mode) -> Tensor:
    """
    Join the Transformer embedding with the pre-Transformer tokens.

    Raises:
        ShapeError: if the operands differ in shape
        ValueError: for an unknown mode
    """
    transformer_out, pre_tokens = as_tensor(transformer_out), as_tensor(pre_tokens)
    try:
        mode = FusionMode(mode)
    except ValueError:
        raise ValueError(f'unknown fusion mode {mode!r}; expected residual or concat') from None
    if transformer_out.shape != pre_tokens.shape:
        raise ShapeError(f'fusion operands differ: {transformer_out.shape} vs {pre_tokens.shape}')
    if mode is FusionMode.RESIDUAL:
        return transformer_out + pre_tokens
    return concat([transformer_out, pre_tokens], axis=-1)


# Weight containers

def _ssm_stack(config: ModelConfig, layers: int, rng) -> List[SsmParams]:
    return [
        SsmParams.create(config.stream_width, config.d_state, config.expand, config.conv_width,
                         config.resolved_dt_rank, rng, bidirectional=config.bidirectional)
        for _ in range(layers)
    ]


@dataclass
class EncoderWeights(ParameterGroup):
    patch_embed: EmbedderWeights
    pos_embed: PosEncWeights
    transformer: List[AttentionWeights]
    bissm: List[SsmParams]
    norm: LayerNormWeights

    @classmethod
    def create(cls, config: ModelConfig, rng: Optional[np.random.Generator]) -> 'EncoderWeights':
        return cls(
            patch_embed=EmbedderWeights.create(config.embed_hidden, config.width, rng),
            pos_embed=PosEncWeights.create(config.pos_hidden, config.width, rng),
            transformer=[
                AttentionWeights.create(config.width, config.heads, config.ffn_ratio, rng)
                for _ in range(config.transformer_layers)
            ],
            bissm=_ssm_stack(config, config.bissm_layers, rng),
            norm=LayerNormWeights.create(config.stream_width),
        )


@dataclass
class ClassifierHead(ParameterGroup):
    """[mean || max] pooled tokens -> hidden (ReLU, dropout) -> logits."""
    fc1: Linear
    fc2: Linear

    @classmethod
    def create(cls, config: ModelConfig, rng: Optional[np.random.Generator]) -> 'ClassifierHead':
        return cls(
            fc1=Linear.create(2 * config.stream_width, config.head_hidden, rng),
            fc2=Linear.create(config.head_hidden, config.num_classes, rng, scale=RESIDUAL_INIT_SCALE),
        )


@dataclass
class MaeDecoderWeights(ParameterGroup):
    mask_token: Tensor
    pos_embed: PosEncWeights
    blocks: List[SsmParams]
    norm: LayerNormWeights
    predictor: Linear

    @classmethod
    def create(cls, config: ModelConfig, rng: Optional[np.random.Generator]) -> 'MaeDecoderWeights':
        width = config.stream_width
        return cls(
            mask_token=parameter(np.zeros(width)),
            pos_embed=PosEncWeights.create(config.pos_hidden, width, rng),
            blocks=_ssm_stack(config, config.decoder_layers, rng),
            norm=LayerNormWeights.create(width),
            predictor=Linear.create(width, 3 * config.patch_size, rng),
        )


@dataclass
class PointABMWeights(ParameterGroup):
    """Encoder plus an optional classification head and MAE decoder."""
    encoder: EncoderWeights
    head: Optional[ClassifierHead] = None
    decoder: Optional[MaeDecoderWeights] = None


def init_weights(config: ModelConfig, rng: Optional[np.random.Generator] = None,
                 head: bool = True, decoder: bool = False) -> PointABMWeights:
    """Build model weights; with rng=None every random draw is zero."""
    return PointABMWeights(
        encoder=EncoderWeights.create(config, rng),
        head=ClassifierHead.create(config, rng) if head else None,
        decoder=MaeDecoderWeights.create(config, rng) if decoder else None,
    )


# Forward passes

def encode(centers, patches, encoder: EncoderWeights, config: ModelConfig) -> Tensor:
    """Ordered (b, n, 3) centers and (b, n, s, 3) patches -> (b, n, W) tokens."""
    tokens = embed_patches(as_tensor(patches), encoder.patch_embed)
    pre_tokens = tokens + pos_encode(centers, encoder.pos_embed)
    stream = pre_tokens
    if config.fuses:
        hidden = pre_tokens
        for block in encoder.transformer:
            hidden = transformer_block(hidden, block, pre_norm=config.pre_norm)
        stream = fuse(hidden - pre_tokens, pre_tokens, config.fusion)
    for block in encoder.bissm:
        stream = bi_ssm_block(stream, block)
    return encoder.norm(stream)


def classify(tokens: Tensor, head: ClassifierHead, config: ModelConfig,
             training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    pooled = concat([tokens.mean(axis=1), tokens.max(axis=1)], axis=-1)
    hidden = dropout(head.fc1(pooled).relu(), config.dropout, rng, training)
    return head.fc2(hidden)


def forward_batch(centers, patches, weights: PointABMWeights, config: ModelConfig,
                  training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits (b, num_classes) for pre-grouped, serialization-ordered patches."""
    if weights.head is None:
        raise ValueError('weights have no classification head')
    tokens = encode(centers, patches, weights.encoder, config)
    return classify(tokens, weights.head, config, training, rng)


def patch_cloud(cloud: PointCloud, config: ModelConfig, seed: int) -> PatchSet:
    """Normalize, sample, group and resort one cloud for this config."""
    if len(cloud) < config.n_patches:
        raise ValueError(f'cloud has {len(cloud)} points, need at least {config.n_patches}')
    return patchify(cloud, config.n_patches, config.patch_size, seed,
                    points_per_cloud=config.points_per_cloud, strategy=config.serialization)


def forward(cloud: PointCloud, weights: PointABMWeights, config: ModelConfig, seed: int = 0) -> Tensor:
    """
    Logits for a single raw point cloud.

    Deterministic in (cloud, weights, config, seed); evaluation mode (no dropout).

    Raises:
        ValueError: if the cloud has fewer than n_patches points
    """
    patch_set = patch_cloud(cloud, config, seed)
    logits = forward_batch(patch_set.ordered_centers()[None], patch_set.ordered_patches()[None],
                           weights, config)
    return logits.reshape(config.num_classes)


def classification_loss(centers, patches, labels, weights: PointABMWeights, config: ModelConfig,
                        training: bool = True,
                        rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    """Mean cross-entropy and the logits it was computed from."""
    logits = forward_batch(centers, patches, weights, config, training, rng)
    return cross_entropy(logits, labels), logits


# Masked autoencoding

def mask_counts(n: int, mask_ratio: float) -> Tuple[int, int]:
    """
    (visible, masked) patch counts for a ratio.

    Raises:
        ValueError: unless 0 < mask_ratio < 1 leaves at least one patch on each side
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f'mask_ratio must lie in (0, 1), got {mask_ratio}')
    masked = int(math.floor(mask_ratio * n))
    if masked == 0 or masked == n:
        raise ValueError(f'mask_ratio {mask_ratio} over {n} patches leaves '
                         f'{n - masked} visible and {masked} masked')
    return n - masked, masked


def mask_indices(n: int, mask_ratio: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted (visible, masked) index arrays partitioning range(n)."""
    _, masked_count = mask_counts(n, mask_ratio)
    chosen = np.zeros(n, dtype=bool)
    chosen[rng.permutation(n)[:masked_count]] = True
    return np.flatnonzero(~chosen), np.flatnonzero(chosen)


def mae_mask(tokens, centers, mask_ratio: float,
             rng: np.random.Generator) -> Tuple[Tensor, np.ndarray]:
    """
    Randomly mask floor(mask_ratio * n) of n tokens.

    Returns the visible tokens (serialization order kept) and the masked
    indices. `centers` must align with `tokens`.
    """
    tokens = as_tensor(tokens)
    n = tokens.shape[0]
    if np.asarray(centers).shape[0] != n:
        raise ShapeError(f'{np.asarray(centers).shape[0]} centers for {n} tokens')
    visible, masked = mask_indices(n, mask_ratio, rng)
    return tokens[visible], masked


def chamfer_loss(pred: Tensor, target) -> Tensor:
    """
    Mean Chamfer distance over a batch of point sets.

    pred is (..., a, 3), target (..., b, 3); each set's distance is the mean
    squared distance from every point to its nearest neighbour in the other
    set, summed over both directions.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape[-2] == 0 or target.shape[-2] == 0:
        raise ValueError('chamfer distance needs non-empty point sets')
    if pred.shape[-1] != 3 or target.shape[-1] != 3:
        raise ShapeError(f'chamfer expects (..., 3) sets, got {pred.shape} and {target.shape}')
    *lead, a, _ = pred.shape
    b = target.shape[-2]
    diff = pred.reshape(*lead, a, 1, 3) - target.reshape(*lead, 1, b, 3)
    squared = (diff * diff).sum(axis=-1)
    per_set = squared.min(axis=-1).mean(axis=-1) + squared.min(axis=-2).mean(axis=-1)
    return per_set.mean()


def chamfer(p, q) -> float:
    """Chamfer distance between two point sets."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2:
        raise ShapeError(f'chamfer expects (a, 3) and (b, 3) sets, got {p.shape} and {q.shape}')
    return chamfer_loss(Tensor(p), Tensor(q)).item()


def mae_loss(centers: np.ndarray, patches: np.ndarray, weights: PointABMWeights,
             config: ModelConfig, rng: np.random.Generator) -> Tensor:
    """
    Chamfer reconstruction loss of masked patches for a batch.

    Args:
        centers: (b, n, 3) ordered centers
        patches: (b, n, s, 3) ordered localized patches
    """
    if weights.decoder is None:
        raise ValueError('weights have no MAE decoder')
    centers, patches = np.asarray(centers), np.asarray(patches)
    batch, n = centers.shape[:2]
    masks = [mask_indices(n, config.mask_ratio, rng) for _ in range(batch)]
    visible = np.stack([v for v, _ in masks])
    masked = np.stack([m for _, m in masks])
    rows = np.arange(batch)[:, None]

    encoded = encode(centers[rows, visible], patches[rows, visible], weights.encoder, config)

    decoder = weights.decoder
    mask_tokens = decoder.mask_token + np.zeros((batch, masked.shape[1], encoded.shape[-1]))
    placed = concat([encoded, mask_tokens], axis=1)
    restore = np.argsort(np.concatenate([visible, masked], axis=1), axis=1)
    stream = placed[rows, restore] + pos_encode(centers, decoder.pos_embed)
    for block in decoder.blocks:
        stream = bi_ssm_block(stream, block)
    stream = decoder.norm(stream)

    predicted = decoder.predictor(stream[rows, masked])
    predicted = predicted.reshape(batch, masked.shape[1], config.patch_size, 3)
    return chamfer_loss(predicted, patches[rows, masked])


# Parameter accounting

def param_count(config: ModelConfig) -> int:
    """Exact scalar parameter count of the classification model."""
    return init_weights(config).param_count()


def param_table(config: ModelConfig) -> List[Tuple[str, int]]:
    """(module, count) rows in model order, ending with the total."""
    weights = init_weights(config)
    encoder = weights.encoder
    rows = [
        ('patch_embed', encoder.patch_embed.param_count()),
        ('pos_embed', encoder.pos_embed.param_count()),
    ]
    rows += [(f'transformer.{i}', block.param_count()) for i, block in enumerate(encoder.transformer)]
    rows += [(f'bissm.{i}', block.param_count()) for i, block in enumerate(encoder.bissm)]
    rows += [('norm', encoder.norm.param_count()), ('head', weights.head.param_count())]
    rows.append(('total', weights.param_count()))
    return rows
