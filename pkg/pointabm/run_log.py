"""
Run event log: an append-only trail of what a command did.

Events are stored through SQLAlchemy in a SQLite database inside the run
directory (`<out>/events.db`). This table is append-only; records are never
modified or deleted.

Every record carries a sequence number, the integrity hash of its
predecessor and its own integrity hash, so edits, deletions and reordering
are detectable. Failing to write an event never aborts the run.
"""

import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple

from sqlalchemy import Boolean, DateTime, Integer, String, Text, URL, create_engine, select
from sqlalchemy.engine import Engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column

from pointabm.utils import calculate_sha256, canonical_json

logger = logging.getLogger(__name__)

RUN_LOG_NAME = 'events.db'
GENESIS_HASH = '0' * 64


class RunEvent:
    """Constants for run events."""
    RUN_STARTED = 'run_started'
    RUN_COMPLETED = 'run_completed'
    RUN_FAILED = 'run_failed'
    CONFIG_RESOLVED = 'config_resolved'
    DATASET_READY = 'dataset_ready'
    EPOCH_COMPLETED = 'epoch_completed'
    CHECKPOINT_SAVED = 'checkpoint_saved'
    CHECKPOINT_LOADED = 'checkpoint_loaded'
    EVALUATION_COMPLETED = 'evaluation_completed'
    DATASET_WRITTEN = 'dataset_written'
    ABLATION_VARIANT_COMPLETED = 'ablation_variant_completed'


class EventCategory:
    """Constants for event categories."""
    SYSTEM = 'system'
    TRAIN = 'train'
    EVALUATE = 'evaluate'
    IO = 'io'


class Base(DeclarativeBase):
    pass


class RunEventRecord(Base):
    """One event of one command, chained to the record before it."""
    __tablename__ = 'run_events'

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    seq: Mapped[int] = mapped_column(Integer, nullable=False)
    timestamp: Mapped[datetime] = mapped_column(DateTime, nullable=False)

    # Which command, and what happened
    command: Mapped[str] = mapped_column(String(20), nullable=False, default='')
    event: Mapped[str] = mapped_column(String(50), nullable=False)
    category: Mapped[str] = mapped_column(String(20), nullable=False)
    details_json: Mapped[Optional[str]] = mapped_column(Text, nullable=True)

    # Outcome
    success: Mapped[bool] = mapped_column(Boolean, nullable=False)
    error_message: Mapped[Optional[str]] = mapped_column(Text, nullable=True)

    # Chain
    previous_hash: Mapped[str] = mapped_column(String(64), nullable=False)
    integrity_hash: Mapped[str] = mapped_column(String(64), nullable=False)

    def __repr__(self):
        return f'<RunEventRecord {self.seq} - {self.event} ({self.command})>'

    def to_dict(self) -> Dict[str, Any]:
        return {
            'seq': self.seq,
            'timestamp': self.timestamp.isoformat(),
            'command': self.command,
            'event': self.event,
            'category': self.category,
            'details': json.loads(self.details_json) if self.details_json else {},
            'success': self.success,
            'error_message': self.error_message,
            'previous_hash': self.previous_hash,
            'integrity_hash': self.integrity_hash,
        }

    def compute_integrity_hash(self) -> str:
        """Hash of this record's content and its predecessor's hash."""
        content = canonical_json({
            'seq': self.seq,
            'timestamp': self.timestamp.isoformat(),
            'command': self.command,
            'event': self.event,
            'category': self.category,
            'details_json': self.details_json,
            'success': bool(self.success),
            'error_message': self.error_message,
        })
        return calculate_sha256((self.previous_hash + content).encode('utf-8'))

    def verify_integrity(self) -> bool:
        return self.integrity_hash == self.compute_integrity_hash()


def run_log_engine(path: str) -> Engine:
    """SQLAlchemy engine for the SQLite run log at `path`."""
    return create_engine(URL.create('sqlite', database=path))


def _utcnow() -> datetime:
    # SQLite DateTime columns are naive; store UTC without tzinfo
    return datetime.now(timezone.utc).replace(tzinfo=None)


class RunLog:
    """Appends chained records to `<directory>/events.db`."""

    def __init__(self, directory: str, command: str = ''):
        os.makedirs(directory or '.', exist_ok=True)
        self.path = os.path.join(directory, RUN_LOG_NAME)
        self.command = command
        self._engine = run_log_engine(self.path)
        Base.metadata.create_all(self._engine)
        self._sequence, self._last_hash = self._resume()

    def _resume(self) -> Tuple[int, str]:
        with Session(self._engine) as session:
            last = session.scalars(
                select(RunEventRecord).order_by(RunEventRecord.id.desc()).limit(1)
            ).first()
            if last is None:
                return 0, GENESIS_HASH
            return last.seq + 1, last.integrity_hash

    def log(
        self,
        event: str,
        category: str = EventCategory.SYSTEM,
        details: Optional[Dict[str, Any]] = None,
        success: bool = True,
        error_message: Optional[str] = None
    ) -> Optional[Dict[str, Any]]:
        """
        Append one event.

        Args:
            event: The event name (use RunEvent constants)
            category: Event category (use EventCategory constants)
            details: Additional structured details (JSON-serializable)
            success: Whether the step succeeded
            error_message: Error message if it failed

        Returns:
            The written record as a dict, or None if writing failed
        """
        try:
            record = RunEventRecord(
                seq=self._sequence,
                timestamp=_utcnow(),
                command=self.command,
                event=event,
                category=category,
                details_json=json.dumps(details, sort_keys=True) if details else None,
                success=success,
                error_message=error_message,
                previous_hash=self._last_hash,
            )
            record.integrity_hash = record.compute_integrity_hash()
            written = record.to_dict()
            with Session(self._engine) as session, session.begin():
                session.add(record)
        except (SQLAlchemyError, OSError, TypeError, ValueError) as e:
            # Event logging must not break the run
            logger.error(f'Failed to write run event {event}: {e}')
            return None
        self._sequence += 1
        self._last_hash = written['integrity_hash']
        return written

    def close(self) -> None:
        self._engine.dispose()


def _records(path: str) -> List[RunEventRecord]:
    if not os.path.exists(path):
        raise FileNotFoundError(f'no run log at {path}')
    engine = run_log_engine(path)
    try:
        with Session(engine, expire_on_commit=False) as session:
            return list(session.scalars(select(RunEventRecord).order_by(RunEventRecord.id)))
    finally:
        engine.dispose()


def read_run_log(path: str) -> List[Dict[str, Any]]:
    """All records in insertion order."""
    return [record.to_dict() for record in _records(path)]


def verify_run_log(path: str) -> Tuple[int, int, List[int]]:
    """
    Verify the hash chain of a run log.

    A record is valid when its sequence number matches its position, its
    stored predecessor hash matches the record before it and its own hash
    matches its content.

    Returns:
        Tuple of (valid_count, invalid_count, invalid_sequence_numbers)
    """
    valid_count = 0
    invalid_count = 0
    invalid_seqs: List[int] = []
    previous = GENESIS_HASH

    for index, record in enumerate(_records(path)):
        if record.seq == index and record.previous_hash == previous and record.verify_integrity():
            valid_count += 1
        else:
            invalid_count += 1
            invalid_seqs.append(record.seq)
        previous = record.integrity_hash

    return valid_count, invalid_count, invalid_seqs
