"""
Command-line entry point.

Commands: train, eval, pretrain, inspect, gen, ablate.

Exit codes:
    0  success
    1  I/O or runtime failure
    2  usage or validation failure (bad config, bad checkpoint,
       config/checkpoint mismatch)
"""

import csv
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import click

from pointabm.checkpoint import CheckpointError, load_checkpoint
from pointabm.config import RunConfig, build_run_config, load_run_config, parse_override, read_config_file, save_run_config
from pointabm.data import DataFormatError, write_dataset
from pointabm.model import param_count
from pointabm.numeric import ShapeError
from pointabm.run_log import EventCategory, RunEvent, RunLog
from pointabm.runner import (
    CONFIG_FILE, evaluate_checkpoint, load_datasets, pretrain_encoder, train_classifier
)
from pointabm.summary import render_summary, summarize_model
from pointabm.validation import ConfigError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

ABLATION_FILE = 'ablation.csv'
ABLATION_HEADER = ['variant', 'fusion', 'ssm_direction', 'seed', 'params', 'test_acc']
ABLATION_VARIANTS = {
    'none': {'transformer_layers': 0, 'fusion': 'residual'},
    'residual': {'fusion': 'residual'},
    'concat': {'fusion': 'concat'},
}
ABLATION_DIRECTIONS = ('bidirectional', 'forward')


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format=LOG_FORMAT, stream=sys.stderr, force=True)


def _flag_overrides(options: Dict[str, Any]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for name in ('epochs', 'seed', 'batch_size', 'save_every', 'init', 'out'):
        if options.get(name) is not None:
            overrides[name] = options[name]
    for item in options.get('set') or ():
        key, value = parse_override(item)
        overrides[key] = value
    return overrides


def resolve_config(options: Dict[str, Any]) -> RunConfig:
    """Defaults < PABM_SEED < --config file < flags and --set."""
    return load_run_config(options.get('config'), _flag_overrides(options))


def _report_config_error(error: ConfigError) -> None:
    for e in error.result.errors:
        click.echo(f'config error: {e.field or "<document>"}: {e.message}', err=True)


def run_command(name: str, func, options: Dict[str, Any]) -> int:
    """
    Run one command function and map failures to exit codes.

    Domain errors are reported on stderr; nothing propagates.
    """
    try:
        return func(options)
    except ConfigError as e:
        _report_config_error(e)
        return EXIT_USAGE
    except CheckpointError as e:
        click.echo(f'checkpoint error: {e}', err=True)
        return EXIT_USAGE
    except DataFormatError as e:
        click.echo(f'data error: {e}', err=True)
        return EXIT_RUNTIME
    except OSError as e:
        click.echo(f'I/O error: {e}', err=True)
        return EXIT_RUNTIME
    except (ShapeError, ArithmeticError, ValueError) as e:
        logger.exception(f'{name} failed')
        click.echo(f'error: {e}', err=True)
        return EXIT_RUNTIME


def _open_run(config: RunConfig, command: str) -> RunLog:
    os.makedirs(config.out, exist_ok=True)
    save_run_config(config, os.path.join(config.out, CONFIG_FILE))
    events = RunLog(config.out, command)
    events.log(RunEvent.RUN_STARTED, EventCategory.SYSTEM, {'seed': config.seed, 'epochs': config.epochs})
    return events


def _run_logged(events: RunLog, body):
    try:
        outcome = body()
    except Exception as e:
        events.log(RunEvent.RUN_FAILED, EventCategory.SYSTEM, {'error_type': type(e).__name__},
                   success=False, error_message=str(e))
        raise
    else:
        events.log(RunEvent.RUN_COMPLETED, EventCategory.SYSTEM)
    finally:
        events.close()
    return outcome


# Commands

def cmd_train(options: Dict[str, Any]) -> int:
    """Train a classifier; writes metrics.csv and model.pabm under --out."""
    config = resolve_config(options)
    events = _open_run(config, 'train')

    def body():
        train, test = load_datasets(config)
        events.log(RunEvent.DATASET_READY, EventCategory.IO,
                   {'train': len(train), 'test': len(test), 'classes': train.class_names})
        return train_classifier(config, train, test, out_dir=config.out, events=events)

    result = _run_logged(events, body)
    if result.final_eval is not None:
        click.echo(f'test accuracy: {result.final_eval.accuracy:.4f}')
    click.echo(f'checkpoint: {result.checkpoint_path}')
    return EXIT_OK


def cmd_eval(options: Dict[str, Any]) -> int:
    """Report overall and per-class accuracy of a checkpoint on a split."""
    checkpoint = load_checkpoint(options['checkpoint'])
    if options.get('config') or options.get('set'):
        config = resolve_config(options)
    else:
        saved = checkpoint.metadata.get('run')
        if not isinstance(saved, dict):
            raise CheckpointError('checkpoint carries no run configuration; pass --config')
        config = build_run_config(saved, _flag_overrides(options), use_env=False)

    train, test = load_datasets(config)
    dataset = train if options.get('split') == 'train' else test
    result = evaluate_checkpoint(checkpoint, config, dataset)

    if options.get('out'):
        events = RunLog(options['out'], 'eval')
        events.log(RunEvent.EVALUATION_COMPLETED, EventCategory.EVALUATE,
                   {'checkpoint': options['checkpoint'], 'split': dataset.split, **result.to_dict()})
        events.close()
    if options.get('json'):
        click.echo(json.dumps({'split': dataset.split, **result.to_dict()}, sort_keys=True, indent=2))
    else:
        click.echo(f'{dataset.split} accuracy: {result.accuracy:.4f} ({result.count} samples)')
        for name, accuracy in result.per_class.items():
            click.echo(f'  {name}: {accuracy:.4f}')
    return EXIT_OK


def cmd_pretrain(options: Dict[str, Any]) -> int:
    """Masked-autoencoder pretraining; writes encoder.pabm under --out."""
    config = resolve_config(options)
    events = _open_run(config, 'pretrain')

    def body():
        train, _ = load_datasets(config)
        events.log(RunEvent.DATASET_READY, EventCategory.IO, {'train': len(train)})
        return pretrain_encoder(config, train, out_dir=config.out, events=events)

    result = _run_logged(events, body)
    click.echo(f'encoder checkpoint: {result.checkpoint_path}')
    return EXIT_OK


def cmd_inspect(options: Dict[str, Any]) -> int:
    """Print the per-module parameter table (or JSON) for a configuration."""
    config = resolve_config(options)
    summary = summarize_model(config.model_config())
    if options.get('json'):
        click.echo(json.dumps(summary.to_dict(), sort_keys=True, indent=2))
    else:
        click.echo(render_summary(summary), nl=False)
    return EXIT_OK


def cmd_gen(options: Dict[str, Any]) -> int:
    """Write the synthetic dataset as .xyz trees plus manifests."""
    config = resolve_config(options)
    config.dataset = 'synthetic'
    events = _open_run(config, 'gen')

    def body():
        train, test = load_datasets(config)
        paths = [write_dataset(split, config.out) for split in (train, test)]
        events.log(RunEvent.DATASET_WRITTEN, EventCategory.IO,
                   {'train': len(train), 'test': len(test), 'manifests': paths})
        return paths

    for path in _run_logged(events, body):
        click.echo(f'manifest: {path}')
    return EXIT_OK


def _parse_list(text: Optional[str], allowed: Sequence[str], what: str) -> List[str]:
    if not text:
        return list(allowed)
    items = [t.strip() for t in text.split(',') if t.strip()]
    unknown = [t for t in items if t not in allowed]
    if unknown:
        raise click.BadParameter(f'unknown {what}: {", ".join(unknown)}')
    return items


def cmd_ablate(options: Dict[str, Any]) -> int:
    """Train every fusion x direction variant per seed and record test accuracy."""
    config = resolve_config(options)
    variants = _parse_list(options.get('variants'), list(ABLATION_VARIANTS), 'variant')
    directions = _parse_list(options.get('directions'), ABLATION_DIRECTIONS, 'direction')
    seeds = [int(s) for s in (options.get('seeds') or str(config.seed)).split(',') if s.strip()]
    events = _open_run(config, 'ablate')

    def body():
        train, test = load_datasets(config)
        rows = []
        for variant in variants:
            for direction in directions:
                for seed in seeds:
                    overrides = dict(ABLATION_VARIANTS[variant], ssm_direction=direction, seed=seed,
                                     init='')
                    if variant != 'none' and config.transformer_layers == 0:
                        overrides['transformer_layers'] = 1
                    variant_config = build_run_config(config.to_dict(), overrides, use_env=False)
                    result = train_classifier(variant_config, train, test)
                    row = {
                        'variant': variant,
                        'fusion': variant_config.fusion,
                        'ssm_direction': direction,
                        'seed': seed,
                        'params': param_count(variant_config.model_config()),
                        'test_acc': result.final_eval.accuracy,
                    }
                    rows.append(row)
                    logger.info(f'ablation {variant}/{direction} seed {seed}: '
                                f'test_acc {row["test_acc"]:.4f}')
                    events.log(RunEvent.ABLATION_VARIANT_COMPLETED, EventCategory.TRAIN, row)
        with open(os.path.join(config.out, ABLATION_FILE), 'w', encoding='utf-8', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=ABLATION_HEADER, lineterminator='\n')
            writer.writeheader()
            writer.writerows(rows)
        return rows

    rows = _run_logged(events, body)
    click.echo(f'{len(rows)} runs written to {os.path.join(config.out, ABLATION_FILE)}')
    return EXIT_OK


# click surface

def config_options(func):
    """--config, --set, --seed shared by every command."""
    func = click.option('--set', 'set', multiple=True, metavar='KEY=VALUE',
                        help='Override one config key (value parsed as JSON when possible).')(func)
    func = click.option('--seed', type=int, default=None, help='Random seed.')(func)
    func = click.option('--config', 'config', type=click.Path(dir_okay=False), default=None,
                        help='JSON run configuration.')(func)
    return func


def training_options(func):
    func = click.option('--out', type=click.Path(file_okay=False), default=None,
                        help='Output directory.')(func)
    func = click.option('--batch-size', 'batch_size', type=int, default=None)(func)
    func = click.option('--epochs', type=int, default=None)(func)
    return func


@click.group()
@click.option('--log-level', envvar='PABM_LOG_LEVEL', default='INFO', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
def cli(log_level: str):
    """Point cloud classification with a Transformer + bidirectional SSM encoder."""
    configure_logging(log_level)


@cli.command()
@config_options
@training_options
@click.option('--save-every', 'save_every', type=int, default=None,
              help='Also save a checkpoint every N epochs.')
@click.option('--init', type=click.Path(dir_okay=False), default=None,
              help='Start from a checkpoint (classifier or pretrained encoder).')
def train(**options):
    """Train a classifier."""
    sys.exit(run_command('train', cmd_train, options))


@cli.command(name='eval')
@config_options
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False))
@click.option('--split', type=click.Choice(['train', 'test']), default='test', show_default=True)
@click.option('--out', type=click.Path(file_okay=False), default=None,
              help='Append an evaluation event to this run directory.')
@click.option('--json', 'json', is_flag=True, help='Print JSON.')
def eval_command(**options):
    """Evaluate a checkpoint."""
    sys.exit(run_command('eval', cmd_eval, options))


@cli.command()
@config_options
@training_options
def pretrain(**options):
    """Masked-autoencoder pretraining of the encoder."""
    sys.exit(run_command('pretrain', cmd_pretrain, options))


@cli.command()
@config_options
@click.option('--json', 'json', is_flag=True, help='Print JSON.')
def inspect(**options):
    """Per-module parameter counts."""
    sys.exit(run_command('inspect', cmd_inspect, options))


@cli.command()
@config_options
@click.option('--out', type=click.Path(file_okay=False), required=True)
def gen(**options):
    """Write the synthetic dataset as .xyz files with manifests."""
    sys.exit(run_command('gen', cmd_gen, options))


@cli.command()
@config_options
@training_options
@click.option('--seeds', default=None, help='Comma-separated seeds (default: --seed).')
@click.option('--variants', default=None, help='Subset of none,residual,concat.')
@click.option('--directions', default=None, help='Subset of bidirectional,forward.')
def ablate(**options):
    """Fusion x SSM-direction ablation grid."""
    sys.exit(run_command('ablate', cmd_ablate, options))


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code instead of exiting."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name='pointabm',
                 standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_RUNTIME
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_RUNTIME
    return EXIT_OK
