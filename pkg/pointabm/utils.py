"""
Utility functions for hashing, batching, and number formatting.
"""

import hashlib
import json
from typing import Any, List


def calculate_sha256(data: bytes) -> str:
    """
    Calculate SHA256 hash of data.

    Args:
        data: Bytes to hash

    Returns:
        Hexadecimal hash string
    """
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str) -> str:
    with open(path, 'rb') as handle:
        return calculate_sha256(handle.read())


def short_hash(full_hash: str, length: int = 16) -> str:
    """Shortened hash for display."""
    if not full_hash:
        return ''
    return full_hash[:length]


def canonical_json(value: Any) -> str:
    """Sorted keys, 2-space indent, trailing newline."""
    return json.dumps(value, sort_keys=True, indent=2) + '\n'


def chunk_list(lst: List[Any], chunk_size: int) -> List[List[Any]]:
    """
    Split a list into chunks of specified size.

    Args:
        lst: List to chunk
        chunk_size: Size of each chunk (the last chunk may be shorter)

    Returns:
        List of chunks
    """
    if chunk_size < 1:
        raise ValueError(f'chunk size must be positive, got {chunk_size}')
    return [lst[i:i + chunk_size] for i in range(0, len(lst), chunk_size)]


def format_count(n: int) -> str:
    """Thousands-separated integer: 14911503 -> '14,911,503'."""
    return f'{n:,}'


def format_millions(n: int, digits: int = 2) -> str:
    """Parameter count in millions: 14911503 -> '14.91M'."""
    return f'{n / 1e6:.{digits}f}M'


def format_metric(value: Any) -> str:
    """CSV cell for a metric; None becomes an empty cell."""
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)
