"""
Model Summary Module

Per-module parameter breakdown of a configuration, with notes on settings
that change the model's shape or behaviour. Rendered as a text table
through a Jinja2 template, or as JSON.

All summaries are generated deterministically from the configuration.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List

from jinja2 import Environment, PackageLoader, select_autoescape

from pointabm.model import FusionMode, ModelConfig, param_table
from pointabm.utils import format_count, format_millions


class NoteLevel(str, Enum):
    """Severity of a configuration note."""
    INFO = 'info'
    WARNING = 'warning'


@dataclass
class ModuleRow:
    """One module's parameter count."""
    name: str
    params: int
    share: float = 0.0


@dataclass
class ConfigNote:
    level: NoteLevel
    field: str
    message: str


@dataclass
class ModelSummary:
    """Parameter breakdown and notes for one configuration."""
    rows: List[ModuleRow] = field(default_factory=list)
    total: int = 0
    stream_width: int = 0
    notes: List[ConfigNote] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """Convert summary to a JSON-ready dictionary."""
        return {
            'total': self.total,
            'total_millions': round(self.total / 1e6, 3),
            'stream_width': self.stream_width,
            'modules': [
                {'name': r.name, 'params': r.params, 'share': round(r.share, 6)}
                for r in self.rows
            ],
            'notes': [
                {'level': n.level.value, 'field': n.field, 'message': n.message}
                for n in self.notes
            ],
            'config': dict(self.config),
        }


jinja_env = Environment(
    loader=PackageLoader('pointabm', 'templates'),
    autoescape=select_autoescape(['html', 'xml']),
    trim_blocks=True,
    lstrip_blocks=True
)
jinja_env.filters['thousands'] = format_count
jinja_env.filters['millions'] = format_millions


def summarize_model(config: ModelConfig) -> ModelSummary:
    """
    Build the parameter breakdown of a configuration.

    Args:
        config: The model configuration

    Returns:
        ModelSummary with per-module rows, total and notes
    """
    table = param_table(config)
    total = table[-1][1]
    rows = [ModuleRow(name, count, count / total if total else 0.0) for name, count in table[:-1]]
    return ModelSummary(
        rows=rows,
        total=total,
        stream_width=config.stream_width,
        notes=_config_notes(config),
        config=config.to_dict(),
    )


def _config_notes(config: ModelConfig) -> List[ConfigNote]:
    notes = []
    if config.transformer_layers == 0:
        notes.append(ConfigNote(
            NoteLevel.INFO, 'transformer_layers',
            'No Transformer layers: tokens go straight to the bi-SSM stack and fusion is skipped.'
        ))
    elif config.fusion == FusionMode.CONCAT.value:
        notes.append(ConfigNote(
            NoteLevel.WARNING, 'fusion',
            f'Concatenation fusion doubles the bi-SSM width to {config.stream_width}; '
            f'the stack grows roughly fourfold.'
        ))
    if not config.bidirectional:
        notes.append(ConfigNote(
            NoteLevel.INFO, 'ssm_direction',
            'Forward-only SSM blocks: the backward scan and its parameters are dropped.'
        ))
    if not config.pre_norm:
        notes.append(ConfigNote(
            NoteLevel.WARNING, 'pre_norm',
            'Post-norm Transformer blocks are not an identity map at initialization.'
        ))
    if config.serialization != 'xyz':
        notes.append(ConfigNote(
            NoteLevel.INFO, 'serialization',
            f'Patch tokens are ordered by the {config.serialization!r} strategy.'
        ))
    return notes


def render_summary(summary: ModelSummary) -> str:
    """Text table of the summary."""
    template = jinja_env.get_template('param_table.txt.j2')
    name_width = max([len('module')] + [len(r.name) for r in summary.rows])
    return template.render(summary=summary, name_width=name_width)
