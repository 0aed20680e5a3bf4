"""
Trainer Service
===============
Seeded mini-batch training of any estimator that exposes ``init_params`` and
``batch_loss`` (MTMT network, S-Learner, T-Learner) with AdamW and a cosine
learning-rate schedule spanning the whole run.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from apps.uplift_engine.constants import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_INCREMENTAL_PENALTY,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_EPOCHS,
    DEFAULT_WEIGHT_DECAY,
    Method,
)
from apps.uplift_engine.services import diffcore as dc
from apps.uplift_engine.services.baselines import SLearner, TLearner
from apps.uplift_engine.services.data_processor import Batch, UpliftDataset, iter_batches
from apps.uplift_engine.services.network import ModelConfig, MtmtNetwork
from utils.decorators import log_stage_time
from utils.exceptions import ConfigurationError, ContractError, DataSchemaError, DataValidationError
from utils.helpers import check_known_keys, digest_arrays

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    max_epochs: int = DEFAULT_MAX_EPOCHS
    seed: int = 0
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    task_loss_weights: Optional[List[float]] = None
    incremental_penalty: float = DEFAULT_INCREMENTAL_PENALTY

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("train.learning_rate must be positive", 'learning_rate')
        if int(self.batch_size) < 1:
            raise ConfigurationError("train.batch_size must be at least 1", 'batch_size')
        if int(self.max_epochs) < 0:
            raise ConfigurationError("train.max_epochs must be non-negative", 'max_epochs')
        if self.weight_decay < 0:
            raise ConfigurationError("train.weight_decay must be non-negative", 'weight_decay')
        if self.incremental_penalty < 0:
            raise ConfigurationError("train.incremental_penalty must be non-negative", 'incremental_penalty')
        if self.task_loss_weights is not None:
            self.task_loss_weights = [float(w) for w in self.task_loss_weights]
            if any(w < 0 for w in self.task_loss_weights):
                raise ConfigurationError("train.task_loss_weights must be non-negative", 'task_loss_weights')

    def weights_for(self, n_tasks: int) -> np.ndarray:
        if self.task_loss_weights is None:
            return np.ones(n_tasks)
        if len(self.task_loss_weights) != n_tasks:
            raise ConfigurationError(
                f"train.task_loss_weights has {len(self.task_loss_weights)} entries, expected {n_tasks}",
                'task_loss_weights',
            )
        return np.asarray(self.task_loss_weights, dtype=np.float64)

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainConfig':
        check_known_keys(data, cls.__dataclass_fields__, 'train')
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epoch_losses: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    checksum: str = ''
    steps: int = 0

    def summary(self) -> dict:
        """Deterministic part of the report (wall time stays in the log)."""
        return {
            'epoch_losses': [float(v) for v in self.epoch_losses],
            'checksum': self.checksum,
            'steps': self.steps,
        }


def build_estimator(method: str, config: ModelConfig):
    if method == Method.MTMT:
        return MtmtNetwork(config)
    if method == Method.S_LEARNER:
        return SLearner(config)
    if method == Method.T_LEARNER:
        return TLearner(config)
    raise ConfigurationError(f"Unknown method '{method}'", 'method')


def batch_loss(estimator, batch: Batch, params: dc.ParameterSet, config: TrainConfig) -> Tuple[dc.Node, dict]:
    """Loss node for one batch plus the parameter nodes it was built from."""
    if len(batch) == 0:
        raise ContractError("batch_loss needs a non-empty batch")
    treated = batch.treated > 0
    n_treatments = estimator.config.n_treatments
    bad = treated & ((batch.secondary < 0) | (batch.secondary >= n_treatments))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataValidationError(
            f"Treated sample {row} has invalid secondary treatment {int(batch.secondary[row])}",
            row=row,
        )
    nodes = params.nodes()
    weights = config.weights_for(estimator.config.n_tasks)
    if isinstance(estimator, MtmtNetwork):
        return estimator.batch_loss(nodes, batch, weights, config.incremental_penalty), nodes
    return estimator.batch_loss(nodes, batch, weights), nodes


def check_dataset(dataset: UpliftDataset, model_config: ModelConfig) -> None:
    """Schema/dimension agreement between a dataset and a model configuration."""
    if dataset.n_features != model_config.feature_dim:
        raise DataSchemaError(
            f"Dataset has {dataset.n_features} features, model expects {model_config.feature_dim}",
            details={'dataset': dataset.n_features, 'model': model_config.feature_dim},
        )
    if dataset.n_tasks != model_config.n_tasks:
        raise DataSchemaError(
            f"Dataset has {dataset.n_tasks} outcome columns, model expects {model_config.n_tasks}",
            details={'dataset': dataset.n_tasks, 'model': model_config.n_tasks},
        )
    if dataset.treatment_count > model_config.n_treatments:
        raise DataSchemaError(
            f"Dataset has {dataset.treatment_count} treatments, model expects {model_config.n_treatments}",
            details={'dataset': dataset.treatment_count, 'model': model_config.n_treatments},
        )


class Trainer:
    """
    Runs shuffled mini-batch optimization. Identical seed, data and configs
    give bit-identical parameters.
    """

    def __init__(self, estimator, config: TrainConfig):
        self.estimator = estimator
        self.config = config

    def initial_params(self) -> dc.ParameterSet:
        return self.estimator.init_params(np.random.default_rng([self.config.seed, 0]))

    @log_stage_time('train')
    def fit(self, dataset: UpliftDataset) -> Tuple[dc.ParameterSet, TrainReport]:
        check_dataset(dataset, self.estimator.config)
        cfg = self.config
        cfg.weights_for(self.estimator.config.n_tasks)

        params = self.initial_params()
        shuffle_rng = np.random.default_rng([cfg.seed, 1])
        steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
        state = dc.OptimizerState.for_params(
            params,
            base_rate=cfg.learning_rate,
            weight_decay=cfg.weight_decay,
            schedule_period=max(1, steps_per_epoch * cfg.max_epochs),
        )
        report = TrainReport()
        started = time.time()

        logger.info(
            f"Training {self.estimator.method}: {len(dataset)} samples, "
            f"{params.count()} parameters, {cfg.max_epochs} epochs x {steps_per_epoch} steps"
        )

        for epoch in range(cfg.max_epochs):
            total = 0.0
            seen = 0
            for batch in iter_batches(dataset, cfg.batch_size, shuffle_rng):
                loss, nodes = batch_loss(self.estimator, batch, params, cfg)
                grads = dc.backward(loss, nodes)
                dc.optimizer_step(params, grads, state)
                total += float(loss.value[0, 0]) * len(batch)
                seen += len(batch)
            epoch_loss = total / seen
            if not math.isfinite(epoch_loss):
                raise ContractError(f"Training diverged at epoch {epoch + 1}", {'epoch': epoch + 1})
            report.epoch_losses.append(epoch_loss)
            logger.info(f"Epoch {epoch + 1}/{cfg.max_epochs}: loss {epoch_loss:.6f} (lr {state.learning_rate:.6g})")

        report.wall_time = time.time() - started
        report.steps = state.step
        report.checksum = digest_arrays(params.arrays)
        return params, report


def fit(dataset: UpliftDataset, model_config: ModelConfig, train_config: TrainConfig,
        method: str = Method.MTMT) -> Tuple[dc.ParameterSet, TrainReport]:
    return Trainer(build_estimator(method, model_config), train_config).fit(dataset)
