"""
Checkpoint Service
==================
Fitted estimators on disk: one JSON document holding the method tag, the
model configuration, the feature scaler and every parameter as base64 of
little-endian float64 bytes. Keys are sorted, so identical parameters give
byte-identical files.
"""

import base64
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from apps.uplift_engine.constants import Method
from apps.uplift_engine.services import diffcore as dc
from apps.uplift_engine.services.data_processor import FeatureScaler
from apps.uplift_engine.services.network import ModelConfig
from apps.uplift_engine.services.trainer import build_estimator
from utils.exceptions import CheckpointError, ConfigurationError
from utils.helpers import digest_arrays, read_json, write_json

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    method: str
    model_config: ModelConfig
    params: dc.ParameterSet
    scaler: FeatureScaler
    feature_names: List[str] = field(default_factory=list)

    @property
    def checksum(self) -> str:
        return digest_arrays(self.params.arrays)

    def estimator(self):
        return build_estimator(self.method, self.model_config)


def _encode(array: np.ndarray) -> Dict:
    array = np.ascontiguousarray(array, dtype='<f8')
    return {
        'shape': list(array.shape),
        'dtype': 'float64',
        'data': base64.b64encode(array.tobytes()).decode('ascii'),
    }


def _decode(name: str, entry: Dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry['shape'])
        raw = base64.b64decode(entry['data'].encode('ascii'), validate=True)
        return np.frombuffer(raw, dtype='<f8').reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"Parameter '{name}' is malformed: {exc}", {'parameter': name}) from exc


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    document = {
        'format_version': FORMAT_VERSION,
        'method': checkpoint.method,
        'model_config': checkpoint.model_config.to_dict(),
        'scaler': checkpoint.scaler.to_dict(),
        'feature_names': list(checkpoint.feature_names),
        'no_decay': sorted(checkpoint.params.no_decay),
        'parameters': {name: _encode(value) for name, value in checkpoint.params.arrays.items()},
        'checksum': checkpoint.checksum,
    }
    path = write_json(document, path)
    logger.info(f"Checkpoint written to {path} ({checkpoint.params.count()} parameters)")
    return path


def load_checkpoint(path, expected_method: str = None) -> Checkpoint:
    """
    Read and verify a checkpoint. Raises CheckpointError when the file is
    unreadable, the checksum does not match, the parameters disagree with
    the stored configuration, or the method differs from ``expected_method``.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}", {'path': str(path)})
    try:
        document = read_json(path)
    except ValueError as exc:
        raise CheckpointError(f"Checkpoint {path} is not valid JSON: {exc}", {'path': str(path)}) from exc

    method = document.get('method')
    if method not in Method.ALL:
        raise CheckpointError(f"Checkpoint has unknown method '{method}'", {'method': method})
    if expected_method is not None and method != expected_method:
        raise CheckpointError(
            f"Checkpoint was trained with '{method}', configuration selects '{expected_method}'",
            {'checkpoint': method, 'config': expected_method},
        )

    try:
        model_config = ModelConfig.from_dict(document['model_config'])
        scaler = FeatureScaler.from_dict(document['scaler'])
    except KeyError as exc:
        raise CheckpointError(f"Checkpoint lacks section {exc}") from exc
    except ConfigurationError as exc:
        raise CheckpointError(f"Checkpoint model configuration is invalid: {exc.message}") from exc

    arrays = {name: _decode(name, entry) for name, entry in document.get('parameters', {}).items()}
    params = dc.ParameterSet(arrays, no_decay=frozenset(document.get('no_decay', [])))
    checkpoint = Checkpoint(
        method=method,
        model_config=model_config,
        params=params,
        scaler=scaler,
        feature_names=list(document.get('feature_names') or []),
    )

    if checkpoint.checksum != document.get('checksum'):
        raise CheckpointError(f"Checkpoint {path} failed its checksum", {'path': str(path)})

    expected = checkpoint.estimator().init_params(np.random.default_rng(0))
    if set(expected.arrays) != set(arrays):
        raise CheckpointError(
            "Checkpoint parameters do not match its model configuration",
            {'missing': sorted(set(expected.arrays) - set(arrays)),
             'unexpected': sorted(set(arrays) - set(expected.arrays))},
        )
    for name, value in expected.arrays.items():
        if value.shape != arrays[name].shape:
            raise CheckpointError(
                f"Parameter '{name}' has shape {arrays[name].shape}, expected {value.shape}",
                {'parameter': name},
            )
    if len(scaler.mean) != model_config.feature_dim:
        raise CheckpointError(
            f"Scaler covers {len(scaler.mean)} features, model expects {model_config.feature_dim}"
        )

    logger.info(f"Loaded {method} checkpoint from {path}")
    return checkpoint
