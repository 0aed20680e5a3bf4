"""
MTMT Network
============
Multi-gate mixture-of-experts user encoder, treatment embeddings, base and
secondary user-treatment interaction paths, feature enhancers, and the
natural-response / base-uplift / incremental-uplift heads.

All computation is batched: a batch of B users flows through the graph as
B x d matrices; each task representation is reshaped into B*L tokens of
width w for the interaction step.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from apps.uplift_engine.constants import AblationVariant, InteractionMode
from apps.uplift_engine.services import diffcore as dc
from apps.uplift_engine.services.data_processor import Batch
from utils.exceptions import (
    ConfigurationError,
    IndexOutOfRangeError,
    ModelNotFittedError,
    ShapeError,
)
from utils.helpers import check_known_keys, chunk_ranges

logger = logging.getLogger(__name__)

BASE_PATH = 'base'
SECONDARY_PATH = 'secondary'

# Rows scored per forward pass at inference
INFERENCE_CHUNK = 8192


@dataclass
class ModelConfig:
    """Architecture and variant flags. Defaults give the full configuration."""

    feature_dim: int
    n_tasks: int = 1
    n_treatments: int = 1
    n_experts: int = 4
    expert_hidden: List[int] = field(default_factory=lambda: [64, 64])
    expert_residual: bool = False
    token_count: int = 8
    token_width: int = 8
    treatment_embed_dim: int = 8
    attention_dim: int = 16
    enhancer_hidden: List[int] = field(default_factory=lambda: [64, 64])
    interaction_mode: str = InteractionMode.ATTENTION
    use_enhancer: bool = True
    tiered: bool = True
    per_task_heads: bool = True
    single_treatment: bool = False

    def __post_init__(self):
        self.expert_hidden = [int(w) for w in self.expert_hidden]
        self.enhancer_hidden = [int(w) for w in self.enhancer_hidden]
        counts = {
            'feature_dim': self.feature_dim,
            'n_tasks': self.n_tasks,
            'n_treatments': self.n_treatments,
            'n_experts': self.n_experts,
            'token_count': self.token_count,
            'token_width': self.token_width,
            'treatment_embed_dim': self.treatment_embed_dim,
            'attention_dim': self.attention_dim,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigurationError(f"model.{name} must be at least 1, got {value}", name)
        if any(w < 1 for w in self.expert_hidden + self.enhancer_hidden):
            raise ConfigurationError("hidden widths must be at least 1", 'hidden')
        if self.use_enhancer and not self.enhancer_hidden:
            raise ConfigurationError("use_enhancer needs at least one enhancer layer", 'enhancer_hidden')
        if self.interaction_mode not in (InteractionMode.ATTENTION, InteractionMode.MATMUL):
            raise ConfigurationError(f"Unknown interaction mode '{self.interaction_mode}'", 'interaction_mode')
        if self.single_treatment and self.n_treatments != 1:
            raise ConfigurationError("single_treatment requires n_treatments == 1", 'single_treatment')
        if self.single_treatment and not self.tiered:
            raise ConfigurationError("single_treatment uses the base branch and cannot be untiered", 'tiered')

    @property
    def representation_size(self) -> int:
        return self.token_count * self.token_width

    @property
    def uplift_feature_size(self) -> int:
        return self.enhancer_hidden[-1] if self.use_enhancer else self.attention_dim

    @property
    def paths(self) -> List[str]:
        if self.single_treatment:
            return [BASE_PATH]
        if not self.tiered:
            return [SECONDARY_PATH]
        return [BASE_PATH, SECONDARY_PATH]

    def parameter_count(self) -> int:
        """Closed-form number of trainable scalars."""
        d, K, n = self.feature_dim, self.n_tasks, self.n_experts
        total = K * n * d
        dims = [d] + self.expert_hidden + [self.representation_size]
        total += n * sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        total += K * self.representation_size
        v, du, w, h = self.treatment_embed_dim, self.attention_dim, self.token_width, self.uplift_feature_size
        for path in self.paths:
            columns = 2 if path == BASE_PATH else self.n_treatments
            total += v * columns + du * v + 2 * du * w
            if self.use_enhancer:
                edims = [du] + self.enhancer_hidden
                total += sum(a * b + b for a, b in zip(edims[:-1], edims[1:]))
            total += K * h
        return total

    def variant(self, name: str) -> 'ModelConfig':
        """Copy of this configuration with one ablation flag changed."""
        if name == AblationVariant.FULL:
            return replace(self)
        if name not in AblationVariant.OVERRIDES:
            raise ConfigurationError(f"Unknown ablation variant '{name}'", 'variant')
        flag, value = AblationVariant.OVERRIDES[name]
        return replace(self, **{flag: value})

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelConfig':
        check_known_keys(data, cls.__dataclass_fields__, 'model')
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UpliftScores:
    """
    Per-sample outputs: natural response (n x K), base uplift (n x K) and
    incremental uplifts (n x K x m, absent for the single-treatment variant).
    """

    natural: np.ndarray
    base: np.ndarray
    incremental: Optional[np.ndarray]

    def composed(self) -> np.ndarray:
        """Overall uplift Gamma for every treatment (n x K x m)."""
        if self.incremental is None:
            return self.base[:, :, None].copy()
        return self.base[:, :, None] + self.incremental


@dataclass
class TaskRepresentation:
    """One task's user representation viewed as L tokens of width w."""

    tokens: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return self.tokens.reshape(1, -1)


@dataclass
class CandidateScore:
    candidate: int
    treatment: Optional[int]
    gamma: np.ndarray
    rank: int


# =============================================================================
# SCALAR COMPOSITION
# =============================================================================

def compose_response(y0: float, tau_base: float, tau_inc: float, treated: bool) -> float:
    """Predicted outcome: treated units add both uplifts to the natural response."""
    if treated:
        return y0 + tau_base + tau_inc
    return y0


def overall_uplift(tau_base: float, tau_inc: float, treated: bool) -> float:
    """Overall effect; the incremental term only counts for treated units."""
    return tau_base + tau_inc * (1.0 if treated else 0.0)


def embed_treatment(index: int, table: np.ndarray) -> np.ndarray:
    """Column ``index`` of an embedding table (one-hot times dense matrix)."""
    table = np.asarray(table, dtype=np.float64)
    if not 0 <= index < table.shape[1]:
        raise IndexOutOfRangeError('treatment', index, table.shape[1])
    one_hot = np.zeros(table.shape[1])
    one_hot[index] = 1.0
    return table @ one_hot


def rank_candidates(gammas: np.ndarray, rank_task: int = 0) -> np.ndarray:
    """
    Candidate order per row, best first: descending Gamma of ``rank_task``,
    ties broken by ascending candidate index. ``gammas`` is n x K x C.
    """
    return np.argsort(-gammas[:, rank_task, :], axis=1, kind='stable')


def _init_uniform(rng: np.random.Generator, shape: Tuple[int, int], fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MtmtNetwork:
    """
    The tiered multi-treatment multi-task uplift network.

    Parameters live in a ``ParameterSet``; the network object only holds the
    configuration, so a fitted parameter set can be shared by many threads.
    """

    method = 'mtmt'

    def __init__(self, config: ModelConfig):
        self.config = config

    # -------------------------------------------------------------------------
    # parameters
    # -------------------------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> dc.ParameterSet:
        cfg = self.config
        d, K, n = cfg.feature_dim, cfg.n_tasks, cfg.n_experts
        v, du, w = cfg.treatment_embed_dim, cfg.attention_dim, cfg.token_width
        arrays: Dict[str, np.ndarray] = {}
        no_decay = set()

        for k in range(K):
            arrays[f'gate.{k}'] = _init_uniform(rng, (n, d), d)
        dims = [d] + cfg.expert_hidden + [cfg.representation_size]
        for j in range(n):
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                arrays[f'expert.{j}.layer{i}.weight'] = _init_uniform(rng, (a, b), a)
                arrays[f'expert.{j}.layer{i}.bias'] = np.zeros((1, b))
        for k in range(K):
            arrays[f'head.natural.{k}'] = _init_uniform(rng, (1, cfg.representation_size), cfg.representation_size)

        h = cfg.uplift_feature_size
        for path in cfg.paths:
            columns = 2 if path == BASE_PATH else cfg.n_treatments
            arrays[f'embed.{path}'] = _init_uniform(rng, (v, columns), columns)
            no_decay.add(f'embed.{path}')
            arrays[f'path.{path}.query'] = _init_uniform(rng, (du, v), v)
            arrays[f'path.{path}.key'] = _init_uniform(rng, (du, w), w)
            arrays[f'path.{path}.value'] = _init_uniform(rng, (du, w), w)
            if cfg.use_enhancer:
                edims = [du] + cfg.enhancer_hidden
                for i, (a, b) in enumerate(zip(edims[:-1], edims[1:])):
                    arrays[f'enhancer.{path}.layer{i}.weight'] = _init_uniform(rng, (a, b), a)
                    arrays[f'enhancer.{path}.layer{i}.bias'] = np.zeros((1, b))
            if cfg.per_task_heads:
                for k in range(K):
                    arrays[f'head.{path}.{k}'] = _init_uniform(rng, (1, h), h)
            else:
                arrays[f'head.{path}.joint'] = _init_uniform(rng, (K, h), h)

        return dc.ParameterSet(arrays, frozenset(no_decay))

    def check_params(self, params: Optional[dc.ParameterSet]) -> dc.ParameterSet:
        if params is None or not params.arrays:
            raise ModelNotFittedError(self.method)
        return params

    # -------------------------------------------------------------------------
    # graph pieces (batched)
    # -------------------------------------------------------------------------

    def _check_task(self, k: int) -> None:
        if not 0 <= k < self.config.n_tasks:
            raise IndexOutOfRangeError('task', k, self.config.n_tasks)

    def _check_features(self, x: np.ndarray) -> None:
        if x.shape[1] != self.config.feature_dim:
            raise ShapeError(
                f"Expected {self.config.feature_dim} features, got {x.shape[1]}",
                (x.shape[0], self.config.feature_dim),
                x.shape,
            )

    def _gate(self, nodes, x: dc.Node, k: int) -> dc.Node:
        return dc.softmax_rows(dc.matmul(x, dc.transpose(nodes[f'gate.{k}'])))

    def _expert(self, nodes, x: dc.Node, j: int) -> dc.Node:
        cfg = self.config
        h = x
        n_layers = len(cfg.expert_hidden) + 1
        for i in range(n_layers):
            out = dc.add(
                dc.matmul(h, nodes[f'expert.{j}.layer{i}.weight']),
                nodes[f'expert.{j}.layer{i}.bias'],
            )
            if i < n_layers - 1:
                out = dc.relu(out)
                if cfg.expert_residual and out.shape == h.shape and i > 0:
                    out = dc.add(out, h)
            h = out
        return h

    def _encode(self, nodes, x: dc.Node) -> List[dc.Node]:
        experts = [self._expert(nodes, x, j) for j in range(self.config.n_experts)]
        reps = []
        for k in range(self.config.n_tasks):
            gate = self._gate(nodes, x, k)
            rep = None
            for j, expert in enumerate(experts):
                term = dc.mul(dc.slice_cols(gate, j, j + 1), expert)
                rep = term if rep is None else dc.add(rep, term)
            reps.append(rep)
        return reps

    def _natural(self, nodes, reps: Sequence[dc.Node]) -> dc.Node:
        columns = [
            dc.matmul(rep, dc.transpose(nodes[f'head.natural.{k}']))
            for k, rep in enumerate(reps)
        ]
        return dc.concat_cols(columns)

    def _embed(self, nodes, path: str, indices: np.ndarray) -> dc.Node:
        table = nodes[f'embed.{path}']
        columns = table.shape[1]
        if indices.size and (indices.min() < 0 or indices.max() >= columns):
            bad = int(indices[(indices < 0) | (indices >= columns)][0])
            raise IndexOutOfRangeError('treatment', bad, columns)
        one_hot = np.zeros((indices.shape[0], columns))
        one_hot[np.arange(indices.shape[0]), indices] = 1.0
        return dc.matmul(dc.constant(one_hot), dc.transpose(table))

    def _interact(self, nodes, path: str, eps: dc.Node, rep: dc.Node) -> Tuple[dc.Node, dc.Node]:
        cfg = self.config
        batch = rep.shape[0]
        L = cfg.token_count
        tokens = dc.reshape(rep, batch * L, cfg.token_width)
        query = dc.matmul(eps, dc.transpose(nodes[f'path.{path}.query']))
        keys = dc.matmul(tokens, dc.transpose(nodes[f'path.{path}.key']))
        values = dc.matmul(tokens, dc.transpose(nodes[f'path.{path}.value']))
        scores = dc.group_dot(query, keys, L)
        if cfg.interaction_mode == InteractionMode.ATTENTION:
            weights = dc.softmax_rows(dc.scale(scores, 1.0 / math.sqrt(cfg.attention_dim)))
        else:
            weights = dc.scale(scores, 1.0 / L)
        return dc.group_weighted_sum(weights, values), weights

    def _enhance(self, nodes, path: str, psi: dc.Node) -> dc.Node:
        if not self.config.use_enhancer:
            return psi
        h = psi
        for i in range(len(self.config.enhancer_hidden)):
            h = dc.relu(dc.add(
                dc.matmul(h, nodes[f'enhancer.{path}.layer{i}.weight']),
                nodes[f'enhancer.{path}.layer{i}.bias'],
            ))
        return h

    def _uplift_branch(
        self,
        nodes,
        path: str,
        eps: dc.Node,
        reps: Sequence[dc.Node],
        attention: Optional[Dict] = None,
    ) -> dc.Node:
        """Uplift of one path for every task (B x K)."""
        cfg = self.config
        if cfg.per_task_heads:
            columns = []
            for k, rep in enumerate(reps):
                psi, weights = self._interact(nodes, path, eps, rep)
                if attention is not None:
                    attention[(path, k)] = weights.value
                feature = self._enhance(nodes, path, psi)
                columns.append(dc.matmul(feature, dc.transpose(nodes[f'head.{path}.{k}'])))
            return dc.concat_cols(columns)

        shared = reps[0]
        for rep in reps[1:]:
            shared = dc.add(shared, rep)
        shared = dc.scale(shared, 1.0 / len(reps))
        psi, weights = self._interact(nodes, path, eps, shared)
        if attention is not None:
            for k in range(len(reps)):
                attention[(path, k)] = weights.value
        feature = self._enhance(nodes, path, psi)
        return dc.matmul(feature, dc.transpose(nodes[f'head.{path}.joint']))

    def forward_nodes(
        self,
        nodes: Dict[str, dc.Node],
        x: np.ndarray,
        secondary: Optional[np.ndarray] = None,
        attention: Optional[Dict] = None,
    ) -> Dict[str, Optional[dc.Node]]:
        """
        Build the graph for a batch. Returns B x K nodes ``natural``, ``base``
        and ``incremental`` (the latter evaluated at the given secondary
        treatment per row); absent branches are None.
        """
        self._check_features(x)
        reps = self._encode(nodes, dc.constant(x))
        out = {
            'natural': self._natural(nodes, reps),
            'base': self._base_branch(nodes, reps, attention),
            'incremental': None,
        }
        if secondary is None:
            secondary = np.zeros(x.shape[0], dtype=np.int64)
        out['incremental'] = self._incremental_branch(nodes, reps, secondary, attention)
        return out

    def _base_branch(self, nodes, reps, attention=None) -> Optional[dc.Node]:
        if BASE_PATH not in self.config.paths:
            return None
        eps_hat = self._embed(nodes, BASE_PATH, np.ones(reps[0].shape[0], dtype=np.int64))
        return self._uplift_branch(nodes, BASE_PATH, eps_hat, reps, attention)

    def _incremental_branch(self, nodes, reps, secondary: np.ndarray, attention=None) -> Optional[dc.Node]:
        if SECONDARY_PATH not in self.config.paths:
            return None
        eps = self._embed(nodes, SECONDARY_PATH, np.asarray(secondary, dtype=np.int64))
        return self._uplift_branch(nodes, SECONDARY_PATH, eps, reps, attention)

    # -------------------------------------------------------------------------
    # training objective
    # -------------------------------------------------------------------------

    def batch_loss(self, nodes: Dict[str, dc.Node], batch: Batch, task_weights: np.ndarray,
                   incremental_penalty: float = 0.0) -> dc.Node:
        """
        Weighted squared error over the batch: control rows are fit by the
        natural response only; treated rows by natural + base + incremental
        at their observed secondary treatment. Divided by the batch size.

        With both branches present, ``incremental_penalty`` adds the weighted
        squared incremental uplift of treated rows, so the base branch carries
        the effect shared by every treatment.
        """
        secondary = np.maximum(batch.secondary, 0)
        out = self.forward_nodes(nodes, batch.x, secondary)
        uplift = None
        for key in ('base', 'incremental'):
            if out[key] is not None:
                uplift = out[key] if uplift is None else dc.add(uplift, out[key])
        treated = dc.constant(batch.treated.reshape(-1, 1))
        weights = dc.constant(np.asarray(task_weights, dtype=np.float64).reshape(1, -1))
        pred = dc.add(out['natural'], dc.mul(treated, uplift))
        residual = dc.square(dc.sub(pred, dc.constant(batch.y)))
        total = dc.sum_all(dc.mul(residual, weights))
        if incremental_penalty > 0 and out['base'] is not None and out['incremental'] is not None:
            shrink = dc.mul(dc.mul(treated, dc.square(out['incremental'])), weights)
            total = dc.add(total, dc.scale(dc.sum_all(shrink), incremental_penalty))
        return dc.scale(total, 1.0 / len(batch))

    # -------------------------------------------------------------------------
    # inference
    # -------------------------------------------------------------------------

    def predict(self, params: dc.ParameterSet, x: np.ndarray) -> UpliftScores:
        """Natural response, base uplift and every incremental uplift for each row."""
        params = self.check_params(params)
        x = dc.as_matrix(x)
        self._check_features(x)
        cfg = self.config
        n, K, m = x.shape[0], cfg.n_tasks, cfg.n_treatments
        natural = np.zeros((n, K))
        base = np.zeros((n, K))
        incremental = None if cfg.single_treatment else np.zeros((n, K, m))

        nodes = params.nodes()
        for start, stop in chunk_ranges(n, INFERENCE_CHUNK):
            chunk = x[start:stop]
            rows = slice(start, stop)
            reps = self._encode(nodes, dc.constant(chunk))
            natural[rows] = self._natural(nodes, reps).value
            base_node = self._base_branch(nodes, reps)
            if base_node is not None:
                base[rows] = base_node.value
            if incremental is not None:
                for t in range(m):
                    treatment = np.full(chunk.shape[0], t, dtype=np.int64)
                    incremental[rows, :, t] = self._incremental_branch(nodes, reps, treatment).value
        return UpliftScores(natural=natural, base=base, incremental=incremental)

    def uplift_matrix(self, params: dc.ParameterSet, x: np.ndarray) -> np.ndarray:
        """Gamma per row, task and treatment (n x K x m)."""
        return self.predict(params, x).composed()

    def attention_scores(self, params: dc.ParameterSet, x: np.ndarray) -> Dict[Tuple[str, int, int], np.ndarray]:
        """
        Raw interaction weights keyed by (path, task, treatment); each value is
        n x L. The base path is keyed with treatment -1.
        """
        params = self.check_params(params)
        x = dc.as_matrix(x)
        nodes = params.nodes()
        result = {}
        treatments = [0] if self.config.single_treatment else range(self.config.n_treatments)
        for t in treatments:
            captured = {}
            self.forward_nodes(nodes, x, np.full(x.shape[0], t, dtype=np.int64), attention=captured)
            for (path, k), weights in captured.items():
                key = (path, k, -1 if path == BASE_PATH else t)
                result[key] = weights
        return result

    # -------------------------------------------------------------------------
    # single-user operations
    # -------------------------------------------------------------------------

    def gate_weights(self, x: np.ndarray, k: int, params: dc.ParameterSet) -> np.ndarray:
        self._check_task(k)
        x = dc.as_matrix(x)
        self._check_features(x)
        nodes = self.check_params(params).nodes()
        return self._gate(nodes, dc.constant(x), k).value[0]

    def encode_user(self, x: np.ndarray, params: dc.ParameterSet) -> List[TaskRepresentation]:
        x = dc.as_matrix(x)
        self._check_features(x)
        nodes = self.check_params(params).nodes()
        cfg = self.config
        return [
            TaskRepresentation(rep.value[0].reshape(cfg.token_count, cfg.token_width))
            for rep in self._encode(nodes, dc.constant(x))
        ]

    def natural_response(self, rep: TaskRepresentation, params: dc.ParameterSet, k: int) -> float:
        self._check_task(k)
        weights = self.check_params(params)[f'head.natural.{k}']
        return float((rep.flat @ weights.T)[0, 0])

    def interact(self, eps: np.ndarray, rep: TaskRepresentation, params: dc.ParameterSet,
                 path: str = SECONDARY_PATH) -> np.ndarray:
        nodes = self.check_params(params).nodes()
        psi, _ = self._interact(nodes, path, dc.constant(eps), dc.constant(rep.flat))
        return psi.value[0]

    def uplift_heads(
        self,
        psi_base: Optional[np.ndarray],
        psi_sec: Optional[np.ndarray],
        params: dc.ParameterSet,
        k: int,
    ) -> Tuple[float, Optional[float]]:
        """
        (base uplift, incremental uplift) for task ``k`` from interaction
        outputs; the incremental entry is None for the single-treatment
        variant, and the base entry is 0 for the untiered variant.
        """
        self._check_task(k)
        nodes = self.check_params(params).nodes()
        cfg = self.config

        def head(path, psi):
            feature = self._enhance(nodes, path, dc.constant(psi))
            if cfg.per_task_heads:
                return float(dc.matmul(feature, dc.transpose(nodes[f'head.{path}.{k}'])).value[0, 0])
            return float(dc.matmul(feature, dc.transpose(nodes[f'head.{path}.joint'])).value[0, k])

        tau_base = head(BASE_PATH, psi_base) if BASE_PATH in cfg.paths else 0.0
        tau_inc = head(SECONDARY_PATH, psi_sec) if SECONDARY_PATH in cfg.paths else None
        return tau_base, tau_inc

    def forward_full(self, sample, params: dc.ParameterSet) -> UpliftScores:
        """UpliftScores for a single user (arrays with a leading axis of 1)."""
        x = getattr(sample, 'x', sample)
        return self.predict(params, dc.as_matrix(x))

    def score_candidates(
        self,
        x: np.ndarray,
        params: dc.ParameterSet,
        rank_task: int = 0,
    ) -> List[CandidateScore]:
        """
        Gamma for {no treatment} and each treatment, best first. The
        no-treatment candidate scores 0 on every task.
        """
        self._check_task(rank_task)
        gammas = candidate_gammas(self.uplift_matrix(params, dc.as_matrix(x)))
        order = rank_candidates(gammas, rank_task)[0]
        return [
            CandidateScore(
                candidate=int(c),
                treatment=None if c == 0 else int(c) - 1,
                gamma=gammas[0, :, c],
                rank=position + 1,
            )
            for position, c in enumerate(order)
        ]


def candidate_gammas(uplift: np.ndarray) -> np.ndarray:
    """Prepend the zero-effect no-treatment candidate: n x K x m -> n x K x (m+1)."""
    n, K, _ = uplift.shape
    return np.concatenate([np.zeros((n, K, 1)), uplift], axis=2)
