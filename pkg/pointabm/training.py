"""
Training Module

Epoch loops for classification and masked-autoencoder pretraining, plus
evaluation.

Design Decisions:
=================

1. Preprocessing is cached:
   - Without augmentation a sample always yields the same patches, so the
     grouped (centers, patches) arrays are computed once per dataset and
     model geometry and kept on the Dataset
   - With augmentation the cloud is normalized, augmented and regrouped
     every epoch from the epoch's rng

2. One AdamW step per mini-batch; the cosine schedule advances per step.
   Vector parameters (norm gains and biases, biases, D) and the SSM
   state matrices a_log are excluded from weight decay.

3. Evaluation runs in a no_grad block with dropout off. Accuracy reported
   for the training split uses this same path.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from pointabm.data import Dataset
from pointabm.model import (
    ModelConfig, PointABMWeights, classification_loss, forward_batch, mae_loss, patch_cloud
)
from pointabm.numeric import cross_entropy, no_grad
from pointabm.optim import (
    DEFAULT_BETAS, DEFAULT_EPSILON, DEFAULT_LR_MAX, DEFAULT_LR_MIN, DEFAULT_WEIGHT_DECAY,
    OptimizerState, adamw_step, cosine_lr
)
from pointabm.pointops import AugmentationSpec, augment, normalize_cloud, subsample, unique_points
from pointabm.pointops import farthest_point_sample, knn_group, serialize_order
from pointabm.utils import chunk_list

logger = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    epochs: int = 300
    batch_size: int = 32
    lr_max: float = DEFAULT_LR_MAX
    lr_min: float = DEFAULT_LR_MIN
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    epsilon: float = DEFAULT_EPSILON
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def optimizer_state(self, weights: PointABMWeights) -> OptimizerState:
        return OptimizerState.for_params(
            weights.state_dict(),
            lr=self.lr_max,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            weight_decay=self.weight_decay,
        )


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    loss: float
    accuracy: Optional[float] = None


@dataclass
class EvalResult:
    """Overall (micro) accuracy, per-class accuracy and mean loss."""
    accuracy: float
    per_class: Dict[str, float]
    loss: float
    count: int

    def to_dict(self) -> Dict:
        return {
            'accuracy': self.accuracy,
            'per_class': dict(self.per_class),
            'loss': self.loss,
            'count': self.count,
        }


def steps_per_epoch(dataset_size: int, batch_size: int) -> int:
    return -(-dataset_size // batch_size)


def decay_mask(weights: PointABMWeights) -> Dict[str, bool]:
    return {
        name: p.ndim > 1 and not name.endswith('a_log')
        for name, p in weights.named_parameters()
    }


# Preprocessing

def _group(cloud, config: ModelConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    centers = farthest_point_sample(cloud, config.n_patches, seed)
    patch_set = knn_group(cloud, centers, config.patch_size)
    patch_set.order = serialize_order(patch_set.centers, config.serialization)
    return patch_set.ordered_centers(), patch_set.ordered_patches()


def prepare_patches(dataset: Dataset, config: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked ordered (centers, patches) for every sample, cached on the dataset."""
    key = (config.points_per_cloud, config.n_patches, config.patch_size, config.serialization)
    cached = dataset.patch_cache.get(key)
    if cached is None:
        groups = [patch_cloud(s.cloud, config, s.seed) for s in dataset.samples]
        cached = (
            np.stack([g.ordered_centers() for g in groups]),
            np.stack([g.ordered_patches() for g in groups]),
        )
        dataset.patch_cache[key] = cached
    return cached


def augmented_patches(dataset: Dataset, indices: np.ndarray, config: ModelConfig,
                      spec: AugmentationSpec,
                      rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Normalize, augment and regroup the selected samples."""
    centers, patches = [], []
    for i in indices:
        sample = dataset.samples[i]
        cloud = unique_points(sample.cloud)
        cloud = subsample(cloud, config.points_per_cloud, np.random.default_rng([sample.seed, 1]))
        cloud = augment(normalize_cloud(cloud), spec, rng)
        c, p = _group(cloud, config, sample.seed)
        centers.append(c)
        patches.append(p)
    return np.stack(centers), np.stack(patches)


def _batch_inputs(dataset: Dataset, batch: np.ndarray, config: ModelConfig,
                  spec: AugmentationSpec, rng: np.random.Generator):
    if spec.enabled:
        return augmented_patches(dataset, batch, config, spec, rng)
    centers, patches = prepare_patches(dataset, config)
    return centers[batch], patches[batch]


def _apply_update(weights: PointABMWeights, state: OptimizerState, lr: float,
                  mask: Dict[str, bool]) -> OptimizerState:
    params = weights.state_dict()
    grads = {
        name: p.grad if p.grad is not None else np.zeros_like(p.data)
        for name, p in weights.named_parameters()
    }
    new_params, state = adamw_step(params, grads, state, lr=lr, decay_mask=mask)
    weights.load_arrays(new_params)
    weights.zero_grad()
    return state


# Epoch loops

def train_epoch(
    dataset: Dataset,
    weights: PointABMWeights,
    state: OptimizerState,
    config: ModelConfig,
    train_config: TrainingConfig,
    rng: np.random.Generator,
    epoch: int = 0
) -> Tuple[PointABMWeights, OptimizerState, EpochMetrics]:
    """
    One pass of shuffled mini-batches with cross-entropy loss.

    The learning rate for each step is cosine_lr(global_step, total_steps)
    over train_config.epochs epochs.

    Returns:
        (weights, optimizer state, metrics with mean loss and in-batch accuracy)
    """
    if len(dataset) == 0:
        raise ValueError('cannot train on an empty dataset')
    per_epoch = steps_per_epoch(len(dataset), train_config.batch_size)
    total = max(train_config.epochs, epoch + 1) * per_epoch
    mask = decay_mask(weights)
    order = rng.permutation(len(dataset))
    labels = dataset.labels

    loss_sum, correct, lr = 0.0, 0, train_config.lr_max
    for batch in chunk_list(list(order), train_config.batch_size):
        batch = np.asarray(batch)
        centers, patches = _batch_inputs(dataset, batch, config, train_config.augmentation, rng)
        loss, logits = classification_loss(centers, patches, labels[batch], weights, config,
                                           training=True, rng=rng)
        loss_sum += loss.item() * len(batch)
        correct += int((logits.data.argmax(axis=1) == labels[batch]).sum())
        loss.backward()
        lr = cosine_lr(min(state.step, total), total, train_config.lr_max, train_config.lr_min)
        state = _apply_update(weights, state, lr, mask)

    metrics = EpochMetrics(epoch=epoch, step=state.step, lr=lr,
                           loss=loss_sum / len(dataset), accuracy=correct / len(dataset))
    logger.debug(f'epoch {epoch}: loss {metrics.loss:.6f}, batch acc {metrics.accuracy:.4f}')
    return weights, state, metrics


def pretrain_epoch(
    dataset: Dataset,
    weights: PointABMWeights,
    state: OptimizerState,
    config: ModelConfig,
    train_config: TrainingConfig,
    rng: np.random.Generator,
    epoch: int = 0
) -> Tuple[PointABMWeights, OptimizerState, EpochMetrics]:
    """One pass of masked reconstruction; labels are ignored."""
    if len(dataset) == 0:
        raise ValueError('cannot pretrain on an empty dataset')
    per_epoch = steps_per_epoch(len(dataset), train_config.batch_size)
    total = max(train_config.epochs, epoch + 1) * per_epoch
    mask = decay_mask(weights)
    order = rng.permutation(len(dataset))

    loss_sum, lr = 0.0, train_config.lr_max
    for batch in chunk_list(list(order), train_config.batch_size):
        batch = np.asarray(batch)
        centers, patches = _batch_inputs(dataset, batch, config, train_config.augmentation, rng)
        loss = mae_loss(centers, patches, weights, config, rng)
        loss_sum += loss.item() * len(batch)
        loss.backward()
        lr = cosine_lr(min(state.step, total), total, train_config.lr_max, train_config.lr_min)
        state = _apply_update(weights, state, lr, mask)

    metrics = EpochMetrics(epoch=epoch, step=state.step, lr=lr, loss=loss_sum / len(dataset))
    logger.debug(f'pretrain epoch {epoch}: chamfer {metrics.loss:.6f}')
    return weights, state, metrics


def evaluate(dataset: Dataset, weights: PointABMWeights, config: ModelConfig,
             batch_size: int = 32) -> EvalResult:
    """Accuracy and loss without touching the weights."""
    if len(dataset) == 0:
        raise ValueError('cannot evaluate an empty dataset')
    centers, patches = prepare_patches(dataset, config)
    labels = dataset.labels
    predictions: List[np.ndarray] = []
    loss_sum = 0.0
    with no_grad():
        for batch in chunk_list(list(range(len(dataset))), batch_size):
            batch = np.asarray(batch)
            logits = forward_batch(centers[batch], patches[batch], weights, config)
            loss_sum += cross_entropy(logits, labels[batch]).item() * len(batch)
            predictions.append(logits.data.argmax(axis=1))
    predicted = np.concatenate(predictions)
    hits = predicted == labels

    per_class = {}
    for label, name in enumerate(dataset.class_names):
        members = labels == label
        if members.any():
            per_class[name] = float(hits[members].mean())
    return EvalResult(
        accuracy=float(hits.mean()),
        per_class=per_class,
        loss=loss_sum / len(dataset),
        count=len(dataset),
    )
