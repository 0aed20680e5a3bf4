"""
Meta-Learner Baselines
======================
S-Learner and T-Learner reference estimators extended to several secondary
treatments. Both reuse the differentiation core and the shared Trainer, and
use the expert stack widths of ``ModelConfig`` so capacity is comparable.
"""

import logging
import math
from typing import Dict, List, Optional

import numpy as np

from apps.uplift_engine.constants import Method
from apps.uplift_engine.services import diffcore as dc
from apps.uplift_engine.services.data_processor import Batch
from apps.uplift_engine.services.network import ModelConfig
from utils.exceptions import ModelNotFittedError, ShapeError

logger = logging.getLogger(__name__)


def _init_stack(rng: np.random.Generator, prefix: str, dims: List[int], arrays: Dict[str, np.ndarray]) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        bound = math.sqrt(1.0 / a)
        arrays[f'{prefix}.layer{i}.weight'] = rng.uniform(-bound, bound, size=(a, b))
        arrays[f'{prefix}.layer{i}.bias'] = np.zeros((1, b))


def _stack(nodes: Dict[str, dc.Node], prefix: str, x: dc.Node, n_layers: int) -> dc.Node:
    """Dense layers with rectifier activations between them and a linear output."""
    h = x
    for i in range(n_layers):
        h = dc.add(dc.matmul(h, nodes[f'{prefix}.layer{i}.weight']), nodes[f'{prefix}.layer{i}.bias'])
        if i < n_layers - 1:
            h = dc.relu(h)
    return h


class _MetaLearner:
    method = None

    def __init__(self, config: ModelConfig):
        self.config = config

    @property
    def n_layers(self) -> int:
        return len(self.config.expert_hidden) + 1

    def check_params(self, params: Optional[dc.ParameterSet]) -> dc.ParameterSet:
        if params is None or not params.arrays:
            raise ModelNotFittedError(self.method)
        return params

    def _check_features(self, x: np.ndarray) -> None:
        if x.shape[1] != self.config.feature_dim:
            raise ShapeError(
                f"Expected {self.config.feature_dim} features, got {x.shape[1]}",
                (x.shape[0], self.config.feature_dim),
                x.shape,
            )

    @staticmethod
    def _weighted_sse(pred: dc.Node, y: np.ndarray, task_weights: np.ndarray) -> dc.Node:
        residual = dc.square(dc.sub(pred, dc.constant(y)))
        return dc.sum_all(dc.mul(residual, dc.constant(np.asarray(task_weights, dtype=np.float64).reshape(1, -1))))


class SLearner(_MetaLearner):
    """
    One response network over [x, base flag, secondary one-hot]. Uplift of
    treatment m is f(x, treated with m) - f(x, untreated).
    """

    method = Method.S_LEARNER

    @property
    def input_width(self) -> int:
        return self.config.feature_dim + 1 + self.config.n_treatments

    def init_params(self, rng: np.random.Generator) -> dc.ParameterSet:
        arrays: Dict[str, np.ndarray] = {}
        dims = [self.input_width] + self.config.expert_hidden + [self.config.n_tasks]
        _init_stack(rng, 'response', dims, arrays)
        return dc.ParameterSet(arrays)

    def design_matrix(self, x: np.ndarray, treated: np.ndarray, secondary: np.ndarray) -> np.ndarray:
        n, m = x.shape[0], self.config.n_treatments
        one_hot = np.zeros((n, m))
        rows = np.flatnonzero(treated > 0)
        one_hot[rows, secondary[rows]] = 1.0
        return np.hstack([x, treated.reshape(-1, 1).astype(np.float64), one_hot])

    def response(self, params: dc.ParameterSet, design: np.ndarray) -> np.ndarray:
        nodes = self.check_params(params).nodes()
        return _stack(nodes, 'response', dc.constant(design), self.n_layers).value

    def batch_loss(self, nodes: Dict[str, dc.Node], batch: Batch, task_weights: np.ndarray) -> dc.Node:
        design = self.design_matrix(batch.x, batch.treated, batch.secondary)
        pred = _stack(nodes, 'response', dc.constant(design), self.n_layers)
        return dc.scale(self._weighted_sse(pred, batch.y, task_weights), 1.0 / len(batch))

    def uplift_matrix(self, params: dc.ParameterSet, x: np.ndarray) -> np.ndarray:
        """Gamma per row, task and treatment (n x K x m)."""
        params = self.check_params(params)
        x = dc.as_matrix(x)
        self._check_features(x)
        n, m = x.shape[0], self.config.n_treatments
        untreated = self.response(params, self.design_matrix(x, np.zeros(n), np.full(n, -1)))
        gammas = np.empty((n, self.config.n_tasks, m))
        for t in range(m):
            treated = self.response(params, self.design_matrix(x, np.ones(n), np.full(n, t)))
            gammas[:, :, t] = treated - untreated
        return gammas


class TLearner(_MetaLearner):
    """
    One response network per group: branch 0 for control, branch t + 1 for
    secondary treatment t. Uplift of treatment t is f_{t+1}(x) - f_0(x).
    """

    method = Method.T_LEARNER

    @property
    def branch_count(self) -> int:
        return self.config.n_treatments + 1

    def init_params(self, rng: np.random.Generator) -> dc.ParameterSet:
        arrays: Dict[str, np.ndarray] = {}
        dims = [self.config.feature_dim] + self.config.expert_hidden + [self.config.n_tasks]
        for g in range(self.branch_count):
            _init_stack(rng, f'branch.{g}', dims, arrays)
        return dc.ParameterSet(arrays)

    def branch_response(self, params: dc.ParameterSet, x: np.ndarray, branch: int) -> np.ndarray:
        nodes = self.check_params(params).nodes()
        return _stack(nodes, f'branch.{branch}', dc.constant(x), self.n_layers).value

    def batch_loss(self, nodes: Dict[str, dc.Node], batch: Batch, task_weights: np.ndarray) -> dc.Node:
        groups = np.where(batch.treated > 0, batch.secondary + 1, 0)
        total = None
        for g in range(self.branch_count):
            rows = np.flatnonzero(groups == g)
            if rows.size == 0:
                continue
            pred = _stack(nodes, f'branch.{g}', dc.constant(batch.x[rows]), self.n_layers)
            term = self._weighted_sse(pred, batch.y[rows], task_weights)
            total = term if total is None else dc.add(total, term)
        return dc.scale(total, 1.0 / len(batch))

    def uplift_matrix(self, params: dc.ParameterSet, x: np.ndarray) -> np.ndarray:
        params = self.check_params(params)
        x = dc.as_matrix(x)
        self._check_features(x)
        control = self.branch_response(params, x, 0)
        gammas = np.empty((x.shape[0], self.config.n_tasks, self.config.n_treatments))
        for t in range(self.config.n_treatments):
            gammas[:, :, t] = self.branch_response(params, x, t + 1) - control
        return gammas


def s_learner_uplift(x: np.ndarray, params: dc.ParameterSet, config: ModelConfig) -> np.ndarray:
    """Gamma for each of the m treatment candidates of one user (K x m)."""
    return SLearner(config).uplift_matrix(params, dc.as_matrix(x))[0]


def t_learner_uplift(x: np.ndarray, params: dc.ParameterSet, config: ModelConfig) -> np.ndarray:
    return TLearner(config).uplift_matrix(params, dc.as_matrix(x))[0]
