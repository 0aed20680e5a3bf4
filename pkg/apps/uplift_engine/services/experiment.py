"""
Experiment Service
==================
Run configuration (one YAML file plus flag overrides) and the pipelines
behind the management commands: data generation, training, evaluation,
candidate scoring and ablation sweeps.

Every pipeline writes into the run's output directory and echoes the
resolved configuration, with all defaults materialised, next to its outputs.
"""

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from django.conf import settings

from apps.uplift_engine.constants import (
    ABLATION_SUMMARY_FILENAME,
    ATTENTION_FILENAME,
    CHECKPOINT_FILENAME,
    DATASET_FILENAME,
    DEFAULT_LIFT_FRACTION,
    DEFAULT_SPLIT,
    MANIFEST_FILENAME,
    ORACLE_FILENAME,
    RESOLVED_CONFIG_FILENAME,
    ROW_ID_COLUMN,
    SCORES_FILENAME,
    TRAIN_LOG_FILENAME,
    TRAIN_SUMMARY_FILENAME,
    AblationVariant,
    InteractionMode,
    Method,
    ReferenceScorer,
    RowErrorPolicy,
)
from apps.uplift_engine.services import data_processor as dp
from apps.uplift_engine.services import metrics
from apps.uplift_engine.services.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from apps.uplift_engine.services.network import ModelConfig, MtmtNetwork, candidate_gammas, rank_candidates
from apps.uplift_engine.services.trainer import TrainConfig, Trainer, build_estimator
from utils.decorators import log_stage_time, retry_on_broker_timeout
from utils.exceptions import (
    CheckpointError,
    ConfigurationError,
    DataSchemaError,
    DataValidationError,
    UsageError,
)
from utils.helpers import check_known_keys, ensure_directory, write_json

logger = logging.getLogger(__name__)

ENGINE_LOGGER = 'apps.uplift_engine'


# =============================================================================
# RUN CONFIGURATION
# =============================================================================

@dataclass
class DataSection:
    """Exactly one source: a CSV ``path`` (with ``schema``) or a ``synthetic`` spec."""

    path: Optional[str] = None
    schema: Optional[dp.DatasetSchema] = None
    synthetic: Optional[dp.SyntheticSpec] = None
    oracle_path: Optional[str] = None
    on_error: str = RowErrorPolicy.ABORT

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'DataSection':
        data = data or {}
        check_known_keys(data, cls.__dataclass_fields__, 'data')
        section = cls(
            path=data.get('path'),
            schema=dp.DatasetSchema.from_dict(data['schema']) if data.get('schema') else None,
            synthetic=dp.SyntheticSpec.from_dict(data['synthetic']) if data.get('synthetic') is not None else None,
            oracle_path=data.get('oracle_path'),
            on_error=data.get('on_error', RowErrorPolicy.ABORT),
        )
        if section.path and section.synthetic is not None:
            raise ConfigurationError("data.path and data.synthetic are mutually exclusive", 'data')
        if section.on_error not in RowErrorPolicy.ALL:
            raise ConfigurationError(f"data.on_error must be one of {RowErrorPolicy.ALL}", 'data.on_error')
        return section

    def to_dict(self) -> dict:
        return {
            'path': self.path,
            'schema': self.schema.to_dict() if self.schema else None,
            'synthetic': self.synthetic.to_dict() if self.synthetic else None,
            'oracle_path': self.oracle_path,
            'on_error': self.on_error,
        }


@dataclass
class EvaluationSection:
    rank_task: int = 0
    lift_fraction: float = DEFAULT_LIFT_FRACTION
    split: List[float] = field(default_factory=lambda: list(DEFAULT_SPLIT))
    references: bool = True
    attention_rows: int = 1000

    def __post_init__(self):
        self.split = [float(f) for f in self.split]
        if len(self.split) != 2:
            raise ConfigurationError("evaluation.split must list a train and a test fraction", 'evaluation.split')
        if not 0.0 < self.lift_fraction <= 1.0:
            raise ConfigurationError("evaluation.lift_fraction must be in (0, 1]", 'evaluation.lift_fraction')
        if self.rank_task < 0:
            raise ConfigurationError("evaluation.rank_task must be non-negative", 'evaluation.rank_task')
        if self.attention_rows < 0:
            raise ConfigurationError("evaluation.attention_rows must be non-negative", 'evaluation.attention_rows')

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'EvaluationSection':
        data = data or {}
        check_known_keys(data, cls.__dataclass_fields__, 'evaluation')
        return cls(**data)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: Dict[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = Method.MTMT
    output_dir: Path = None
    seed: int = 0
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    SECTIONS = ('data', 'model', 'train', 'method', 'output_dir', 'seed', 'evaluation')

    def model_config(self, dataset: dp.UpliftDataset) -> ModelConfig:
        """Model section completed with the dataset's dimensions where it is silent."""
        dims = {
            'feature_dim': dataset.n_features,
            'n_tasks': dataset.n_tasks,
            'n_treatments': dataset.treatment_count,
        }
        return ModelConfig.from_dict({**dims, **self.model})

    def resolved(self, model_config: Optional[ModelConfig] = None) -> dict:
        return {
            'method': self.method,
            'seed': self.seed,
            'output_dir': str(self.output_dir),
            'data': self.data.to_dict(),
            'model': model_config.to_dict() if model_config else dict(self.model),
            'train': self.train.to_dict(),
            'evaluation': asdict(self.evaluation),
        }

    def write_resolved(self, model_config: Optional[ModelConfig] = None) -> Path:
        path = ensure_directory(self.output_dir) / RESOLVED_CONFIG_FILENAME
        path.write_text(yaml.safe_dump(self.resolved(model_config), sort_keys=True), encoding='utf-8')
        return path


def load_run_config(path=None, seed: Optional[int] = None, output_dir=None) -> RunConfig:
    """
    Read a YAML run configuration. ``seed`` and ``output_dir`` come from the
    global flags and win over file values.
    """
    raw: Dict[str, Any] = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"Config file not found: {path}", 'config')
        try:
            raw = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"Config file {path} is not valid YAML: {exc}", 'config') from exc
    check_known_keys(raw, RunConfig.SECTIONS, 'config')

    method = raw.get('method', Method.MTMT)
    if method not in Method.ALL:
        raise ConfigurationError(f"method must be one of {Method.ALL}, got '{method}'", 'method')

    run_seed = int(seed if seed is not None else raw.get('seed', 0))
    train_section = dict(raw.get('train') or {})
    if seed is not None or 'seed' not in train_section:
        train_section['seed'] = run_seed

    model_section = raw.get('model') or {}
    check_known_keys(model_section, ModelConfig.__dataclass_fields__, 'model')

    out = output_dir or raw.get('output_dir') or settings.UPLIFT_OUTPUT_ROOT
    return RunConfig(
        data=DataSection.from_dict(raw.get('data')),
        model=dict(model_section),
        train=TrainConfig.from_dict(train_section),
        method=method,
        output_dir=Path(out),
        seed=run_seed,
        evaluation=EvaluationSection.from_dict(raw.get('evaluation')),
    )


# =============================================================================
# DATA LOADING
# =============================================================================

@dataclass
class PreparedData:
    train: dp.UpliftDataset
    test: dp.UpliftDataset
    scaler: dp.FeatureScaler
    oracle: Optional[dp.OracleITE]


def _schema_for(run: RunConfig, csv_path: Path) -> dp.DatasetSchema:
    if run.data.schema is not None:
        return run.data.schema
    manifest = csv_path.parent / MANIFEST_FILENAME
    if manifest.exists():
        spec, _ = dp.read_manifest(manifest)
        return spec.schema()
    raise UsageError(
        f"No schema for {csv_path.name}: give data.schema or keep the generator manifest beside it",
        'data.schema',
    )


def _load_oracle(run: RunConfig, csv_path: Path, dataset: dp.UpliftDataset) -> Optional[dp.OracleITE]:
    oracle_path = Path(run.data.oracle_path) if run.data.oracle_path else csv_path.parent / ORACLE_FILENAME
    if not oracle_path.exists():
        return None
    return dp.load_oracle_csv(oracle_path, dataset.n_tasks, dataset.treatment_count)


def load_dataset(run: RunConfig, path=None) -> Tuple[dp.UpliftDataset, Optional[dp.OracleITE]]:
    """The configured dataset (or the CSV at ``path``) and its oracle effects when known."""
    if path is not None:
        csv_path = Path(path)
    elif run.data.path:
        csv_path = Path(run.data.path)
    elif run.data.synthetic is not None:
        return dp.generate_synthetic(run.data.synthetic, run.seed)
    else:
        raise UsageError("The run configuration has no data source", 'data')

    dataset = dp.load_csv(csv_path, _schema_for(run, csv_path), on_error=run.data.on_error)
    return dataset, _load_oracle(run, csv_path, dataset)


def prepare_data(run: RunConfig) -> PreparedData:
    """Seeded train/test split with the scaler fitted on the training part."""
    dataset, oracle = load_dataset(run)
    train, test = dp.split(dataset, run.evaluation.split, run.seed)
    if len(train) == 0:
        raise DataValidationError("Training split is empty")
    scaler = dp.FeatureScaler.fit(train)
    logger.info(f"Split {len(dataset)} samples into {len(train)} train / {len(test)} test")
    return PreparedData(scaler.transform(train), scaler.transform(test), scaler, oracle)


# =============================================================================
# LOGGING
# =============================================================================

@contextmanager
def train_log(output_dir: Path):
    """Mirror engine log records at INFO and above into the run's train.log."""
    engine = logging.getLogger(ENGINE_LOGGER)
    handler = logging.FileHandler(ensure_directory(output_dir) / TRAIN_LOG_FILENAME, mode='w', encoding='utf-8')
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter('{asctime} {levelname} {message}', style='{'))
    previous = engine.level
    if engine.getEffectiveLevel() > logging.INFO:
        engine.setLevel(logging.INFO)
    engine.addHandler(handler)
    try:
        yield
    finally:
        engine.removeHandler(handler)
        engine.setLevel(previous)
        handler.close()


# =============================================================================
# PIPELINES
# =============================================================================

@dataclass
class GenDataResult:
    dataset_path: Path
    oracle_path: Path
    manifest_path: Path
    rows: int


def run_gen_data(run: RunConfig) -> GenDataResult:
    if run.data.synthetic is None:
        raise UsageError("gen-data needs a data.synthetic section", 'data.synthetic')
    out = ensure_directory(run.output_dir)
    dataset, oracle = dp.generate_synthetic(run.data.synthetic, run.seed)
    result = GenDataResult(
        dataset_path=dp.write_csv(dataset, out / DATASET_FILENAME),
        oracle_path=dp.write_oracle_csv(oracle, out / ORACLE_FILENAME),
        manifest_path=dp.write_manifest(run.data.synthetic, run.seed, len(dataset), out / MANIFEST_FILENAME),
        rows=len(dataset),
    )
    run.write_resolved()
    logger.info(f"Generated {len(dataset)} samples into {out}")
    return result


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoint_path: Path
    epoch_losses: List[float]
    checksum: str
    data: PreparedData


def run_train(run: RunConfig, data: Optional[PreparedData] = None) -> TrainResult:
    out = ensure_directory(run.output_dir)
    data = data or prepare_data(run)
    model_config = run.model_config(data.train)
    run.write_resolved(model_config)

    estimator = build_estimator(run.method, model_config)
    with train_log(out):
        params, report = Trainer(estimator, run.train).fit(data.train)
        logger.info(f"Wall time {report.wall_time:.2f}s")

    checkpoint = Checkpoint(
        method=run.method,
        model_config=model_config,
        params=params,
        scaler=data.scaler,
        feature_names=data.train.schema.feature_names,
    )
    checkpoint_path = save_checkpoint(checkpoint, out / CHECKPOINT_FILENAME)
    write_json(
        {
            **report.summary(),
            'method': run.method,
            'parameter_count': params.count(),
            'n_train': len(data.train),
            'n_test': len(data.test),
            'train_config': run.train.to_dict(),
            'model_config': model_config.to_dict(),
        },
        out / TRAIN_SUMMARY_FILENAME,
    )
    return TrainResult(checkpoint, checkpoint_path, report.epoch_losses, report.checksum, data)


def _check_against_checkpoint(checkpoint: Checkpoint, dataset: dp.UpliftDataset) -> None:
    cfg = checkpoint.model_config
    if dataset.n_features != cfg.feature_dim or dataset.n_tasks != cfg.n_tasks:
        raise CheckpointError(
            f"Checkpoint expects {cfg.feature_dim} features and {cfg.n_tasks} tasks, "
            f"dataset has {dataset.n_features} and {dataset.n_tasks}",
            {'checkpoint': [cfg.feature_dim, cfg.n_tasks], 'dataset': [dataset.n_features, dataset.n_tasks]},
        )
    if dataset.treatment_count > cfg.n_treatments:
        raise CheckpointError(
            f"Checkpoint scores {cfg.n_treatments} treatments, dataset has {dataset.treatment_count}"
        )


def _attention_frame(network: MtmtNetwork, checkpoint: Checkpoint, dataset: dp.UpliftDataset,
                     limit: int) -> pd.DataFrame:
    rows = min(limit, len(dataset))
    weights = network.attention_scores(checkpoint.params, dataset.features[:rows])
    frames = []
    for (path, task, treatment), values in sorted(weights.items()):
        tokens = values.shape[1]
        frames.append(pd.DataFrame({
            ROW_ID_COLUMN: np.repeat(dataset.row_ids[:rows], tokens),
            'path': path,
            'task': task,
            'treatment': treatment,
            'token': np.tile(np.arange(tokens), rows),
            'score': values.ravel(),
        }))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


@dataclass
class EvaluateResult:
    report: metrics.EvaluationReport
    references: Dict[str, metrics.EvaluationReport]
    output_dir: Path


@log_stage_time('evaluate')
def run_evaluate(run: RunConfig, checkpoint_path=None, dataset_path=None,
                 data: Optional[PreparedData] = None) -> EvaluateResult:
    """
    Score the evaluation dataset (``dataset_path`` in full, otherwise the
    configured test split) and write the report, curves and effect files.
    """
    out = ensure_directory(run.output_dir)
    checkpoint = load_checkpoint(checkpoint_path or out / CHECKPOINT_FILENAME, expected_method=run.method)

    if dataset_path is not None:
        dataset, oracle = load_dataset(run, dataset_path)
    elif data is not None:
        dataset, oracle = data.test, data.oracle
    else:
        prepared = prepare_data(run)
        dataset, oracle = prepared.test, prepared.oracle
    _check_against_checkpoint(checkpoint, dataset)
    if dataset_path is not None:
        dataset = checkpoint.scaler.transform(dataset)
    run.write_resolved(checkpoint.model_config)

    estimator = checkpoint.estimator()
    lift = run.evaluation.lift_fraction
    if isinstance(estimator, MtmtNetwork):
        predicted = estimator.predict(checkpoint.params, dataset.features)
        scores = predicted.composed()
        metrics.effect_distributions(dataset.row_ids, predicted.base, predicted.incremental).write(out)
        if checkpoint.model_config.interaction_mode == InteractionMode.ATTENTION and run.evaluation.attention_rows:
            _attention_frame(estimator, checkpoint, dataset, run.evaluation.attention_rows).to_csv(
                out / ATTENTION_FILENAME, index=False,
            )
    else:
        scores = estimator.uplift_matrix(checkpoint.params, dataset.features)

    report = metrics.evaluate(scores, dataset, method=run.method, lift_fraction=lift)
    report.write(out)

    references = {}
    if run.evaluation.references:
        if oracle is not None:
            references[ReferenceScorer.ORACLE] = metrics.evaluate(
                metrics.oracle_scores(oracle, dataset), dataset, ReferenceScorer.ORACLE, lift,
            )
        references[ReferenceScorer.RANDOM] = metrics.evaluate(
            metrics.random_scores(len(dataset), dataset.n_tasks, scores.shape[2], run.seed),
            dataset, ReferenceScorer.RANDOM, lift,
        )
        for name, reference in references.items():
            reference.write(out / name)
    return EvaluateResult(report, references, out)


def load_feature_rows(path, feature_names: List[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Feature matrix (columns by name) and row ids from a scoring CSV."""
    path = Path(path)
    if not path.exists():
        raise DataSchemaError(f"Feature file not found: {path}", details={'path': str(path)})
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    missing = [name for name in feature_names if name not in df.columns]
    if missing:
        raise DataSchemaError(
            f"Feature file {path.name} lacks {len(missing)} of {len(feature_names)} feature columns",
            missing[0],
            {'missing': missing},
        )
    columns = []
    for name in feature_names:
        values, bad = dp.parse_numeric_column(df[name])
        if bad.any():
            first = int(np.flatnonzero(bad)[0])
            raise DataValidationError(
                f"Unparseable value in column '{name}' at line {first + 2}", row=first, line=first + 2,
            )
        columns.append(values)
    features = np.column_stack(columns) if columns else np.zeros((len(df), 0))
    if ROW_ID_COLUMN in df.columns:
        ids, bad = dp.parse_numeric_column(df[ROW_ID_COLUMN])
        if bad.any():
            raise DataValidationError(f"Unparseable {ROW_ID_COLUMN} in {path.name}")
        row_ids = ids.astype(np.int64)
    else:
        row_ids = np.arange(len(df))
    return features, row_ids


def scores_frame(row_ids: np.ndarray, uplift: np.ndarray, rank_task: int) -> pd.DataFrame:
    """
    One row per user and candidate, best candidate first. Candidate 0 is
    "no treatment" (Gamma 0, treatment -1); candidate j + 1 is treatment j.
    """
    gammas = candidate_gammas(uplift)
    n, n_tasks, n_candidates = gammas.shape
    order = rank_candidates(gammas, rank_task)
    users = np.repeat(np.arange(n), n_candidates)
    candidates = order.ravel()
    frame = pd.DataFrame({
        ROW_ID_COLUMN: row_ids[users],
        'candidate': candidates,
        'treatment': candidates - 1,
    })
    for k in range(n_tasks):
        frame[f'gamma_task{k}'] = gammas[users, k, candidates]
    frame['rank'] = np.tile(np.arange(1, n_candidates + 1), n)
    return frame


def run_score(run: RunConfig, features_path, checkpoint_path=None) -> Path:
    out = ensure_directory(run.output_dir)
    checkpoint = load_checkpoint(checkpoint_path or out / CHECKPOINT_FILENAME, expected_method=run.method)
    cfg = checkpoint.model_config
    if run.evaluation.rank_task >= cfg.n_tasks:
        raise ConfigurationError(
            f"evaluation.rank_task {run.evaluation.rank_task} exceeds the model's {cfg.n_tasks} tasks",
            'evaluation.rank_task',
        )
    names = checkpoint.feature_names or [f'x{j}' for j in range(cfg.feature_dim)]
    features, row_ids = load_feature_rows(features_path, names)
    uplift = checkpoint.estimator().uplift_matrix(checkpoint.params, checkpoint.scaler.transform_array(features))
    path = out / SCORES_FILENAME
    scores_frame(row_ids, uplift, run.evaluation.rank_task).to_csv(path, index=False)
    run.write_resolved(cfg)
    logger.info(f"Scored {len(row_ids)} users x {cfg.n_treatments + 1} candidates into {path}")
    return path


# =============================================================================
# ABLATION
# =============================================================================

def ablation_variants(run: RunConfig) -> List[Tuple[str, RunConfig]]:
    """The full model and one run per single-flag variant, in a fixed order."""
    if run.method != Method.MTMT:
        raise UsageError("ablate applies to the mtmt method only", 'method')
    variants = []
    for name in AblationVariant.ORDER:
        model = dict(run.model)
        if name in AblationVariant.OVERRIDES:
            flag, value = AblationVariant.OVERRIDES[name]
            model[flag] = value
        variants.append((name, replace(run, model=model, output_dir=Path(run.output_dir) / name)))
    return variants


def variant_payload(run: RunConfig) -> dict:
    """JSON-safe description of one variant run for the task queue."""
    return run.resolved()


def run_from_payload(payload: dict) -> RunConfig:
    return RunConfig(
        data=DataSection.from_dict(payload['data']),
        model=dict(payload['model']),
        train=TrainConfig.from_dict(payload['train']),
        method=payload['method'],
        output_dir=Path(payload['output_dir']),
        seed=int(payload['seed']),
        evaluation=EvaluationSection.from_dict(payload['evaluation']),
    )


@log_stage_time('variant')
def run_variant(payload: dict) -> List[dict]:
    """Train and evaluate one variant; returns its report rows."""
    run = run_from_payload(payload)
    trained = run_train(run)
    result = run_evaluate(run, checkpoint_path=trained.checkpoint_path, data=trained.data)
    return result.report.to_frame().to_dict(orient='records')


@retry_on_broker_timeout(max_retries=3, delay=5.0)
def _collect(async_result):
    return async_result.get(timeout=settings.UPLIFT_ABLATION_TIMEOUT)


def _dispatch(payloads: List[dict]) -> List[List[dict]]:
    from apps.uplift_engine.tasks import run_ablation_variant

    wave = settings.UPLIFT_NUM_THREADS or len(payloads)
    results = []
    for start in range(0, len(payloads), wave):
        pending = [run_ablation_variant.delay(p) for p in payloads[start:start + wave]]
        results.extend(_collect(r) for r in pending)
    return results


def run_ablate(run: RunConfig) -> Path:
    variants = ablation_variants(run)
    out = ensure_directory(run.output_dir)
    run.write_resolved()
    payloads = [variant_payload(v) for _, v in variants]

    if settings.UPLIFT_ABLATION_USE_CELERY:
        results = _dispatch(payloads)
    else:
        results = [run_variant(p) for p in payloads]

    rows = []
    for (name, _), records in zip(variants, results):
        for record in records:
            rows.append({'variant': name, **record})
    summary = pd.DataFrame(rows)
    path = out / ABLATION_SUMMARY_FILENAME
    summary.to_csv(path, index=False)
    logger.info(f"Ablation of {len(variants)} variants written to {path}")
    return path
