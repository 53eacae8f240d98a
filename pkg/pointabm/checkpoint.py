"""
Checkpoint Module

Named-tensor bundles in a fixed little-endian binary layout:

    magic      4 bytes   b'PABM'
    version    u32       1
    count      u32       number of tensors
    per tensor:
        name_len   u32
        name       name_len bytes, UTF-8
        rank       u32
        dims       u32 x rank
        payload    float32 x prod(dims), row-major
    meta_len   u32
    metadata   meta_len bytes, canonical JSON (sorted keys)

Design Decisions:
=================

1. Byte-exact round trips:
   - Tensors are stored in the order given; metadata is serialized with
     sorted keys and no whitespace, so save -> load -> save reproduces the
     file byte for byte

2. Strict reader:
   - Wrong magic, unsupported version, truncation, duplicate names and
     trailing bytes all raise CheckpointError
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from pointabm.utils import calculate_sha256, short_hash

logger = logging.getLogger(__name__)


MAGIC = b'PABM'
FORMAT_VERSION = 1

_U32 = struct.Struct('<I')


class CheckpointError(ValueError):
    """An unreadable or incompatible checkpoint."""


@dataclass
class Checkpoint:
    """Ordered name -> array map plus JSON metadata."""
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> Dict[str, Any]:
        return dict(self.metadata.get('config', {}))


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize to the binary layout (payloads rounded to float32)."""
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(checkpoint.tensors))]
    for name, array in checkpoint.tensors.items():
        encoded = name.encode('utf-8')
        array = np.asarray(array)
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(d) for d in array.shape)
        parts.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    meta = json.dumps(checkpoint.metadata, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts.append(_U32.pack(len(meta)))
    parts.append(meta)
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f'truncated checkpoint while reading {what} at byte {self.offset}')
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse the binary layout.

    Raises:
        CheckpointError: on bad magic, unknown version or malformed content
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC), 'magic') != MAGIC:
        raise CheckpointError('bad magic: not a PABM checkpoint')
    version = reader.u32('version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')

    count = reader.u32('tensor count')
    tensors: Dict[str, np.ndarray] = {}
    for index in range(count):
        raw_name = reader.take(reader.u32(f'name length of tensor {index}'), f'name of tensor {index}')
        try:
            name = raw_name.decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointError(f'tensor {index} name is not valid UTF-8') from None
        if name in tensors:
            raise CheckpointError(f'duplicate tensor name {name!r}')
        rank = reader.u32(f'rank of {name}')
        dims = tuple(reader.u32(f'dims of {name}') for _ in range(rank))
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = reader.take(4 * size, f'payload of {name}')
        tensors[name] = np.frombuffer(payload, dtype='<f4').reshape(dims).copy()

    meta_raw = reader.take(reader.u32('metadata length'), 'metadata')
    try:
        metadata = json.loads(meta_raw.decode('utf-8')) if meta_raw else {}
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError('metadata is not valid JSON') from None
    if reader.offset != len(data):
        raise CheckpointError(f'{len(data) - reader.offset} trailing bytes after metadata')
    return Checkpoint(tensors, metadata)


def save_checkpoint(path: str, tensors: Mapping[str, np.ndarray],
                    metadata: Optional[Dict[str, Any]] = None) -> str:
    """
    Write a checkpoint file.

    Returns:
        SHA-256 of the written bytes
    """
    data = encode_checkpoint(Checkpoint(dict(tensors), dict(metadata or {})))
    with open(path, 'wb') as handle:
        handle.write(data)
    digest = calculate_sha256(data)
    logger.info(f'saved checkpoint {path} ({len(tensors)} tensors, sha256 {short_hash(digest)})')
    return digest


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint file.

    Raises:
        CheckpointError: malformed content
        OSError: if the file cannot be read
    """
    with open(path, 'rb') as handle:
        data = handle.read()
    checkpoint = decode_checkpoint(data)
    logger.debug(f'loaded checkpoint {path} ({len(checkpoint.tensors)} tensors)')
    return checkpoint


def check_compatible(checkpoint: Checkpoint, expected: Mapping[str, Tuple[int, ...]],
                     require_all: bool = True) -> None:
    """
    Verify names and shapes against a model's parameters.

    Args:
        expected: Parameter shapes by name
        require_all: Every expected name must be present (otherwise the
            checkpoint may cover a subset, e.g. a pretrained encoder)

    Raises:
        CheckpointError: unknown names, missing names or shape mismatches
    """
    unknown = [n for n in checkpoint.tensors if n not in expected]
    if unknown:
        raise CheckpointError(f'checkpoint has tensors the model lacks: {", ".join(unknown[:5])}')
    if require_all:
        missing = [n for n in expected if n not in checkpoint.tensors]
        if missing:
            raise CheckpointError(f'checkpoint is missing tensors: {", ".join(missing[:5])}')
    for name, array in checkpoint.tensors.items():
        if tuple(array.shape) != tuple(expected[name]):
            raise CheckpointError(f'{name}: checkpoint shape {array.shape} != model shape {expected[name]}')
