"""
Run orchestration shared by the command-line entry points.

Builds datasets and weights from a RunConfig, drives the epoch loops,
writes metrics rows and checkpoints, and records run events.

Design Decisions:
=================

1. Seeds:
   - SeedSequence(seed) spawns one stream for weight initialization and one
     for shuffling, dropout, masking and augmentation, so a seed fixes the
     whole run

2. Storage-precision evaluation:
   - Checkpoints hold float32. Per-epoch accuracies are computed on the
     weights rounded to float32, so evaluating a saved checkpoint
     reproduces the reported numbers exactly

3. Metrics rows:
   - epoch,step,lr,loss,train_acc,val_acc; a zero-epoch run writes
     "0,0,<lr_max>,,,"; pretraining leaves both accuracy columns empty
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from pointabm.checkpoint import (
    Checkpoint, CheckpointError, check_compatible, load_checkpoint, save_checkpoint
)
from pointabm.config import RunConfig
from pointabm.data import Dataset, load_manifest_dataset, make_synthetic_dataset
from pointabm.model import ModelConfig, PointABMWeights, init_weights
from pointabm.run_log import EventCategory, RunEvent, RunLog
from pointabm.training import EvalResult, evaluate, pretrain_epoch, train_epoch
from pointabm.utils import file_sha256, format_metric
from pointabm.validation import ConfigError, ValidationResult

logger = logging.getLogger(__name__)


METRICS_HEADER = 'epoch,step,lr,loss,train_acc,val_acc'
METRICS_FILE = 'metrics.csv'
FINAL_CHECKPOINT = 'model.pabm'
ENCODER_CHECKPOINT = 'encoder.pabm'
CONFIG_FILE = 'config.json'

KIND_CLASSIFIER = 'classifier'
KIND_ENCODER = 'encoder'

# Checkpoint config fields that must match for weights to be reusable
ARCHITECTURE_FIELDS = (
    'n_patches', 'patch_size', 'width', 'transformer_layers', 'heads', 'bissm_layers', 'fusion',
    'ffn_ratio', 'd_state', 'expand', 'conv_width', 'dt_rank', 'ssm_direction', 'embed_hidden',
    'pos_hidden',
)


@dataclass
class RunResult:
    weights: PointABMWeights
    rows: List[str] = field(default_factory=list)
    history: List[Dict[str, Any]] = field(default_factory=list)
    final_eval: Optional[EvalResult] = None
    checkpoint_path: Optional[str] = None


def seed_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """(init rng, training rng) derived from one seed."""
    init_seq, train_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(train_seq)


def load_datasets(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """Synthetic or manifest-backed (train, test) datasets for a run."""
    if config.dataset == 'synthetic':
        return make_synthetic_dataset(
            config.n_per_class,
            kinds=config.kinds,
            noise=config.noise,
            split_seed=config.split_seed,
            n_points=config.n_points,
            train_fraction=config.train_fraction,
        )
    train = load_manifest_dataset(config.train_manifest, 'train')
    test = load_manifest_dataset(config.test_manifest, 'test', class_names=train.class_names)
    if train.num_classes != config.num_classes:
        result = ValidationResult()
        result.add_error('num_classes', f'manifest lists {train.num_classes} classes, '
                         f'config has num_classes {config.num_classes}', 'cross_field', 'data')
        raise ConfigError(result)
    return train, test


def rounded_copy(weights: PointABMWeights, config: ModelConfig) -> PointABMWeights:
    """The weights as a checkpoint would store them (float32-rounded)."""
    copy = init_weights(config, head=weights.head is not None, decoder=weights.decoder is not None)
    copy.load_arrays({
        name: p.data.astype(np.float32).astype(np.float64)
        for name, p in weights.named_parameters()
    })
    return copy


def metrics_row(epoch: int, step: int, lr: float, loss: Optional[float] = None,
                train_acc: Optional[float] = None, val_acc: Optional[float] = None) -> str:
    return ','.join(format_metric(v) for v in (epoch, step, lr, loss, train_acc, val_acc))


def checkpoint_metadata(config: RunConfig, kind: str, epoch: int,
                        metrics: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        'format': 'pointabm',
        'kind': kind,
        'config': config.model_config().to_dict(),
        'run': config.to_dict(),
        'seed': config.seed,
        'epoch': epoch,
        'metrics': metrics or {},
    }


def check_architecture(saved: Dict[str, Any], model_config: ModelConfig) -> None:
    """
    Raises:
        CheckpointError: if an architecture field differs
    """
    current = model_config.to_dict()
    for name in ARCHITECTURE_FIELDS:
        if name in saved and saved[name] != current[name]:
            raise CheckpointError(f'config/checkpoint mismatch: {name} is {current[name]!r}, '
                                  f'checkpoint has {saved[name]!r}')


def load_into(weights: PointABMWeights, checkpoint: Checkpoint, model_config: ModelConfig) -> None:
    """
    Copy checkpoint tensors into weights. Encoder checkpoints may cover
    a subset of the names; classifier checkpoints must cover all of them.

    Raises:
        CheckpointError: on any architecture, name or shape mismatch
    """
    check_architecture(checkpoint.config, model_config)
    expected = {name: p.shape for name, p in weights.named_parameters()}
    partial = checkpoint.metadata.get('kind') == KIND_ENCODER
    check_compatible(checkpoint, expected, require_all=not partial)
    weights.load_arrays(checkpoint.tensors)


def _write_rows(path: str, rows: List[str]) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(METRICS_HEADER + '\n')
        handle.writelines(row + '\n' for row in rows)


def train_classifier(config: RunConfig, train: Dataset, test: Optional[Dataset] = None,
                     out_dir: Optional[str] = None, events: Optional[RunLog] = None) -> RunResult:
    """
    Train from scratch (or from config.init) and evaluate after each epoch.

    With out_dir set, metrics.csv is rewritten after every epoch and
    checkpoints are saved every save_every epochs and at the end.
    """
    model_config = config.model_config()
    train_config = config.training_config()
    init_rng, rng = seed_streams(config.seed)
    weights = init_weights(model_config, init_rng)

    if config.init:
        checkpoint = load_checkpoint(config.init)
        load_into(weights, checkpoint, model_config)
        logger.info(f'initialized from {config.init} ({len(checkpoint.tensors)} tensors)')
        if events:
            events.log(RunEvent.CHECKPOINT_LOADED, EventCategory.IO,
                       {'path': config.init, 'tensors': len(checkpoint.tensors),
                        'kind': checkpoint.metadata.get('kind'),
                        'sha256': file_sha256(config.init)})

    state = train_config.optimizer_state(weights)
    result = RunResult(weights=weights)
    metrics_path = os.path.join(out_dir, METRICS_FILE) if out_dir else None

    def save(name: str, epoch: int, metrics: Dict[str, Any]) -> str:
        path = os.path.join(out_dir, name)
        digest = save_checkpoint(path, weights.state_dict(),
                                 checkpoint_metadata(config, KIND_CLASSIFIER, epoch, metrics))
        if events:
            events.log(RunEvent.CHECKPOINT_SAVED, EventCategory.IO,
                       {'path': path, 'epoch': epoch, 'sha256': digest})
        return path

    if config.epochs == 0:
        result.rows.append(metrics_row(0, 0, train_config.lr_max))

    for epoch in range(1, config.epochs + 1):
        weights, state, metrics = train_epoch(train, weights, state, model_config, train_config,
                                              rng, epoch=epoch - 1)
        stored = rounded_copy(weights, model_config)
        train_acc = evaluate(train, stored, model_config, config.batch_size).accuracy
        val_acc = evaluate(test, stored, model_config, config.batch_size).accuracy if test else None
        result.rows.append(metrics_row(epoch, state.step, metrics.lr, metrics.loss, train_acc, val_acc))
        snapshot = {'loss': metrics.loss, 'train_acc': train_acc, 'val_acc': val_acc}
        result.history.append({'epoch': epoch, 'step': state.step, 'lr': metrics.lr, **snapshot})
        logger.info(f'epoch {epoch}/{config.epochs}: loss {metrics.loss:.4f} '
                    f'train_acc {train_acc:.4f} val_acc {format_metric(val_acc) or "-"}')
        if events:
            events.log(RunEvent.EPOCH_COMPLETED, EventCategory.TRAIN, {'epoch': epoch, **snapshot})
        if out_dir:
            _write_rows(metrics_path, result.rows)
            if config.save_every and epoch % config.save_every == 0 and epoch < config.epochs:
                save(f'checkpoint_epoch{epoch:04d}.pabm', epoch, snapshot)

    if out_dir:
        _write_rows(metrics_path, result.rows)
        final_metrics = result.history[-1] if result.history else {}
        result.checkpoint_path = save(FINAL_CHECKPOINT, config.epochs, final_metrics)
    if test is not None:
        result.final_eval = evaluate(test, rounded_copy(weights, model_config), model_config,
                                     config.batch_size)
    result.weights = weights
    return result


def pretrain_encoder(config: RunConfig, dataset: Dataset, out_dir: Optional[str] = None,
                     events: Optional[RunLog] = None) -> RunResult:
    """Masked-autoencoder pretraining; saves an encoder-only checkpoint."""
    model_config = config.model_config()
    train_config = config.training_config()
    init_rng, rng = seed_streams(config.seed)
    weights = init_weights(model_config, init_rng, head=False, decoder=True)
    state = train_config.optimizer_state(weights)
    result = RunResult(weights=weights)

    if config.epochs == 0:
        result.rows.append(metrics_row(0, 0, train_config.lr_max))
    for epoch in range(1, config.epochs + 1):
        weights, state, metrics = pretrain_epoch(dataset, weights, state, model_config,
                                                 train_config, rng, epoch=epoch - 1)
        result.rows.append(metrics_row(epoch, state.step, metrics.lr, metrics.loss))
        result.history.append({'epoch': epoch, 'step': state.step, 'lr': metrics.lr,
                               'loss': metrics.loss})
        logger.info(f'pretrain epoch {epoch}/{config.epochs}: chamfer {metrics.loss:.6f}')
        if events:
            events.log(RunEvent.EPOCH_COMPLETED, EventCategory.TRAIN,
                       {'epoch': epoch, 'loss': metrics.loss})
        if out_dir:
            _write_rows(os.path.join(out_dir, METRICS_FILE), result.rows)

    if out_dir:
        _write_rows(os.path.join(out_dir, METRICS_FILE), result.rows)
        path = os.path.join(out_dir, ENCODER_CHECKPOINT)
        encoder_tensors = {
            f'encoder.{name}': p.data for name, p in weights.encoder.named_parameters()
        }
        last = result.history[-1] if result.history else {}
        digest = save_checkpoint(path, encoder_tensors,
                                 checkpoint_metadata(config, KIND_ENCODER, config.epochs, last))
        result.checkpoint_path = path
        if events:
            events.log(RunEvent.CHECKPOINT_SAVED, EventCategory.IO,
                       {'path': path, 'epoch': config.epochs, 'sha256': digest})
    result.weights = weights
    return result


def evaluate_checkpoint(checkpoint: Checkpoint, config: RunConfig, dataset: Dataset) -> EvalResult:
    """
    Evaluate a classifier checkpoint without modifying it.

    Raises:
        CheckpointError: encoder-only checkpoint or config/checkpoint mismatch
    """
    if checkpoint.metadata.get('kind') == KIND_ENCODER:
        raise CheckpointError('encoder-only checkpoint has no classification head')
    model_config = config.model_config()
    weights = init_weights(model_config)
    load_into(weights, checkpoint, model_config)
    return evaluate(dataset, weights, model_config, config.batch_size)
