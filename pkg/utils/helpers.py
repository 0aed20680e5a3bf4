"""
Helper Functions
================
Utility functions used across the application.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Tuple

import numpy as np

from utils.exceptions import ConfigurationError


def digest_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """
    Order-independent digest of a mapping of named float64 arrays.

    Names are visited in sorted order and each array contributes its name,
    its shape and its little-endian bytes, so two parameter sets share a
    digest exactly when they are bit-identical.

    Args:
        arrays: Mapping of parameter name to array

    Returns:
        Hexadecimal hash string
    """
    sha = hashlib.sha256()
    for name in sorted(arrays):
        value = np.ascontiguousarray(arrays[name], dtype='<f8')
        sha.update(name.encode('utf-8'))
        sha.update(repr(value.shape).encode('utf-8'))
        sha.update(value.tobytes())
    return sha.hexdigest()


def chunk_ranges(total: int, size: int) -> Iterator[Tuple[int, int]]:
    """Yield (start, stop) pairs covering range(total) in chunks of ``size``."""
    for start in range(0, total, max(1, size)):
        yield start, min(total, start + size)


def ensure_directory(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(data: Dict[str, Any], path) -> Path:
    """Write JSON with sorted keys so identical content gives identical bytes."""
    path = Path(path)
    ensure_directory(path.parent)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def read_json(path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding='utf-8'))


def format_metric(value: float, digits: int = 6) -> str:
    """Fixed-width rendering for text reports ('nan' for undefined values)."""
    if value is None or not np.isfinite(value):
        return 'nan'
    return f"{value:.{digits}f}"


def check_known_keys(data: Mapping[str, Any], allowed, section: str) -> None:
    """Reject keys a configuration section does not define (exit status 2)."""
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"Section '{section}' must be a mapping", section)
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigurationError(f"Unknown {section} keys: {unknown}", f'{section}.{unknown[0]}')
