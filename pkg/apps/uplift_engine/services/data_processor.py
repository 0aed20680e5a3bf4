"""
Data Processor Service
======================
Randomized-trial datasets: synthetic generation with known effects, CSV
ingestion and export, seeded splits, feature scaling and mini-batching.
Column work goes through pandas; sample arrays are numpy.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from apps.uplift_engine.constants import (
    BASE_TREATMENT_COLUMN,
    ROW_ID_COLUMN,
    SECONDARY_TREATMENT_COLUMN,
    EffectFunction,
    FeatureKind,
    NaturalFunction,
    OutcomeKind,
    RowErrorPolicy,
)
from utils.exceptions import (
    DataProcessingError,
    DataSchemaError,
    DataValidationError,
    SpecError,
)
from utils.helpers import check_known_keys, read_json, write_json

logger = logging.getLogger(__name__)


# =============================================================================
# SCHEMA & SAMPLES
# =============================================================================

@dataclass(frozen=True)
class FeatureColumn:
    name: str
    kind: str = FeatureKind.CONTINUOUS


@dataclass
class DatasetSchema:
    """Column layout of an uplift dataset."""

    features: List[FeatureColumn]
    outcome_columns: List[str]
    base_treatment_column: str = BASE_TREATMENT_COLUMN
    secondary_treatment_column: Optional[str] = SECONDARY_TREATMENT_COLUMN
    treatment_count: Optional[int] = None

    def __post_init__(self):
        self.features = [
            f if isinstance(f, FeatureColumn)
            else FeatureColumn(f) if isinstance(f, str)
            else FeatureColumn(**f)
            for f in self.features
        ]
        if not self.features:
            raise DataSchemaError("Schema needs at least one feature column")
        if not self.outcome_columns:
            raise DataSchemaError("Schema needs at least one outcome column")
        for f in self.features:
            if f.kind not in FeatureKind.ALL:
                raise DataSchemaError(f"Unknown feature kind '{f.kind}'", f.name)
        names = self.column_names
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise DataSchemaError(f"Duplicate column names: {duplicates}", duplicates[0])

    @property
    def feature_names(self) -> List[str]:
        return [f.name for f in self.features]

    @property
    def column_names(self) -> List[str]:
        names = self.feature_names + [self.base_treatment_column]
        if self.secondary_treatment_column:
            names.append(self.secondary_treatment_column)
        return names + list(self.outcome_columns)

    @property
    def continuous_mask(self) -> np.ndarray:
        return np.array([f.kind == FeatureKind.CONTINUOUS for f in self.features])

    @classmethod
    def from_dict(cls, data: dict) -> 'DatasetSchema':
        check_known_keys(data, cls.__dataclass_fields__, 'schema')
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    """One observation."""

    x: np.ndarray
    base_treatment: int
    secondary: Optional[int]
    y: np.ndarray


@dataclass
class UpliftDataset:
    """
    Immutable collection of samples stored column-wise.

    ``secondary`` is -1 for control units. Datasets without a secondary
    treatment column map every treated unit to treatment 0.
    """

    features: np.ndarray
    base_treatment: np.ndarray
    secondary: np.ndarray
    outcomes: np.ndarray
    row_ids: np.ndarray
    schema: DatasetSchema
    treatment_count: int = 1

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.base_treatment = np.asarray(self.base_treatment, dtype=np.int64)
        self.secondary = np.asarray(self.secondary, dtype=np.int64)
        self.outcomes = np.asarray(self.outcomes, dtype=np.float64)
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        for array in (self.features, self.base_treatment, self.secondary,
                      self.outcomes, self.row_ids):
            array.setflags(write=False)
        self.validate()

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_tasks(self) -> int:
        return self.outcomes.shape[1]

    @property
    def treated(self) -> np.ndarray:
        return self.base_treatment == 1

    def validate(self) -> None:
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.outcomes.ndim != 2:
            raise DataSchemaError("features and outcomes must be 2-D")
        for name, array in (('treatment', self.base_treatment), ('secondary', self.secondary),
                            ('outcomes', self.outcomes), ('row_ids', self.row_ids)):
            if array.shape[0] != n:
                raise DataSchemaError(f"Column group '{name}' has {array.shape[0]} rows, expected {n}", name)
        if self.features.shape[1] != len(self.schema.features):
            raise DataSchemaError(
                f"Dataset has {self.features.shape[1]} features, schema lists {len(self.schema.features)}"
            )
        if self.outcomes.shape[1] != len(self.schema.outcome_columns):
            raise DataSchemaError(
                f"Dataset has {self.outcomes.shape[1]} outcomes, schema lists {len(self.schema.outcome_columns)}"
            )
        if not np.isfinite(self.outcomes).all():
            row = int(np.argwhere(~np.isfinite(self.outcomes))[0][0])
            raise DataValidationError(f"Non-finite outcome in row {row}", row=row)
        bad_flag = ~np.isin(self.base_treatment, (0, 1))
        if bad_flag.any():
            row = int(np.flatnonzero(bad_flag)[0])
            raise DataValidationError(f"Treatment flag must be 0 or 1 (row {row})", row=row)
        treated = self.base_treatment == 1
        bad_treated = treated & ((self.secondary < 0) | (self.secondary >= self.treatment_count))
        if bad_treated.any():
            row = int(np.flatnonzero(bad_treated)[0])
            raise DataValidationError(
                f"Treated row {row} has secondary treatment {int(self.secondary[row])}, "
                f"expected 0..{self.treatment_count - 1}",
                row=row,
            )
        bad_control = ~treated & (self.secondary != -1)
        if bad_control.any():
            row = int(np.flatnonzero(bad_control)[0])
            raise DataValidationError(f"Control row {row} carries a secondary treatment", row=row)

    def sample(self, i: int) -> Sample:
        secondary = int(self.secondary[i])
        return Sample(
            x=self.features[i].copy(),
            base_treatment=int(self.base_treatment[i]),
            secondary=secondary if secondary >= 0 else None,
            y=self.outcomes[i].copy(),
        )

    def samples(self) -> List[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def subset(self, indices: Sequence[int]) -> 'UpliftDataset':
        indices = np.asarray(indices, dtype=np.int64)
        return UpliftDataset(
            features=self.features[indices],
            base_treatment=self.base_treatment[indices],
            secondary=self.secondary[indices],
            outcomes=self.outcomes[indices],
            row_ids=self.row_ids[indices],
            schema=self.schema,
            treatment_count=self.treatment_count,
        )

    def with_features(self, features: np.ndarray) -> 'UpliftDataset':
        return UpliftDataset(
            features=features,
            base_treatment=self.base_treatment,
            secondary=self.secondary,
            outcomes=self.outcomes,
            row_ids=self.row_ids,
            schema=self.schema,
            treatment_count=self.treatment_count,
        )

    def to_frame(self) -> pd.DataFrame:
        schema = self.schema
        df = pd.DataFrame(self.features, columns=schema.feature_names)
        df.insert(0, ROW_ID_COLUMN, self.row_ids)
        df[schema.base_treatment_column] = self.base_treatment
        if schema.secondary_treatment_column:
            df[schema.secondary_treatment_column] = pd.array(
                np.where(self.secondary >= 0, self.secondary, 0), dtype='Int64'
            )
            df.loc[self.secondary < 0, schema.secondary_treatment_column] = pd.NA
        for k, column in enumerate(schema.outcome_columns):
            df[column] = self.outcomes[:, k]
        return df


# =============================================================================
# SYNTHETIC RCT GENERATION
# =============================================================================

@dataclass
class EffectSpec:
    function: str = EffectFunction.CONSTANT
    magnitude: float = 0.0
    feature: int = 0


@dataclass
class NaturalSpec:
    function: str = NaturalFunction.LOGISTIC
    base_rate: float = 0.3


def _default_incrementals() -> List[EffectSpec]:
    return [
        EffectSpec(EffectFunction.SIGN_SWITCH, 0.02, 1),
        EffectSpec(EffectFunction.SIGN_SWITCH, -0.02, 2),
    ]


@dataclass
class SyntheticSpec:
    """
    Generator parameters. Defaults describe the tiered benchmark: a large,
    heterogeneous base effect plus small sign-switching incrementals.
    """

    n_features: int = 10
    n_tasks: int = 2
    n_treatments: int = 2
    sample_count: int = 50000
    treatment_probability: float = 0.5
    secondary_probabilities: List[float] = field(default_factory=lambda: [0.5, 0.5])
    base_effect: EffectSpec = field(default_factory=lambda: EffectSpec(EffectFunction.LINEAR, 0.10, 0))
    incremental_effects: List[EffectSpec] = field(default_factory=_default_incrementals)
    natural: NaturalSpec = field(default_factory=NaturalSpec)
    outcome_kind: str = OutcomeKind.BINARY
    noise_sigma: float = 0.1
    discrete_features: int = 0
    discrete_levels: int = 4

    def __post_init__(self):
        if isinstance(self.base_effect, dict):
            self.base_effect = EffectSpec(**self.base_effect)
        self.incremental_effects = [
            e if isinstance(e, EffectSpec) else EffectSpec(**e) for e in self.incremental_effects
        ]
        if isinstance(self.natural, dict):
            self.natural = NaturalSpec(**self.natural)
        self.secondary_probabilities = [float(p) for p in self.secondary_probabilities]
        self.validate()

    def validate(self) -> None:
        for name in ('n_features', 'n_tasks', 'n_treatments', 'sample_count'):
            if int(getattr(self, name)) < 1:
                raise SpecError(f"{name} must be at least 1", name)
        if not 0.0 < self.treatment_probability < 1.0:
            raise SpecError(
                f"treatment_probability must lie in (0, 1), got {self.treatment_probability}",
                'treatment_probability',
            )
        probs = np.asarray(self.secondary_probabilities, dtype=np.float64)
        if probs.shape != (self.n_treatments,) or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise SpecError(
                f"secondary_probabilities must be a simplex over {self.n_treatments} treatments",
                'secondary_probabilities',
            )
        if len(self.incremental_effects) != self.n_treatments:
            raise SpecError(
                f"Expected {self.n_treatments} incremental effects, got {len(self.incremental_effects)}",
                'incremental_effects',
            )
        for effect in [self.base_effect] + self.incremental_effects:
            if effect.function not in EffectFunction.ALL:
                raise SpecError(f"Unknown effect function '{effect.function}'", 'function')
            if not math.isfinite(effect.magnitude):
                raise SpecError("Effect magnitudes must be finite", 'magnitude')
            if not 0 <= effect.feature < self.n_features:
                raise SpecError(f"Effect feature {effect.feature} out of range", 'feature')
        if self.natural.function not in NaturalFunction.ALL:
            raise SpecError(f"Unknown natural response '{self.natural.function}'", 'natural')
        if self.outcome_kind not in OutcomeKind.ALL:
            raise SpecError(f"Unknown outcome kind '{self.outcome_kind}'", 'outcome_kind')
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be non-negative", 'noise_sigma')
        if self.discrete_features < 0 or self.discrete_levels < 1:
            raise SpecError("discrete feature settings must be non-negative", 'discrete_features')

    @classmethod
    def from_dict(cls, data: dict) -> 'SyntheticSpec':
        check_known_keys(data, cls.__dataclass_fields__, 'synthetic')
        for effect in [data.get('base_effect')] + list(data.get('incremental_effects') or []):
            if isinstance(effect, dict):
                check_known_keys(effect, EffectSpec.__dataclass_fields__, 'effect')
        if isinstance(data.get('natural'), dict):
            check_known_keys(data['natural'], NaturalSpec.__dataclass_fields__, 'natural')
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def schema(self) -> DatasetSchema:
        features = [FeatureColumn(f'x{j}') for j in range(self.n_features)]
        features += [
            FeatureColumn(f'c{j}', FeatureKind.DISCRETE) for j in range(self.discrete_features)
        ]
        return DatasetSchema(
            features=features,
            outcome_columns=[f'y{k}' for k in range(self.n_tasks)],
            treatment_count=self.n_treatments,
        )


@dataclass
class OracleITE:
    """Noiseless per-sample effects: base (n x K) and incremental (n x K x m)."""

    row_ids: np.ndarray
    base: np.ndarray
    incremental: np.ndarray

    def take(self, row_ids: Sequence[int]) -> 'OracleITE':
        position = {int(r): i for i, r in enumerate(self.row_ids)}
        idx = np.array([position[int(r)] for r in row_ids], dtype=np.int64)
        return OracleITE(self.row_ids[idx], self.base[idx], self.incremental[idx])

    def composed(self) -> np.ndarray:
        """Overall effect per sample, task and treatment (n x K x m)."""
        return self.base[:, :, None] + self.incremental

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({ROW_ID_COLUMN: self.row_ids})
        n_tasks, n_treatments = self.incremental.shape[1], self.incremental.shape[2]
        for k in range(n_tasks):
            df[f'base_task{k}'] = self.base[:, k]
            for m in range(n_treatments):
                df[f'incremental_task{k}_treatment{m}'] = self.incremental[:, k, m]
        return df


def evaluate_effect(effect: EffectSpec, x: np.ndarray, task: int) -> np.ndarray:
    """Planted effect of one function for every row of the continuous features ``x``."""
    column = x[:, (effect.feature + task) % x.shape[1]]
    if effect.function == EffectFunction.CONSTANT:
        return np.full(x.shape[0], effect.magnitude)
    if effect.function == EffectFunction.LINEAR:
        return effect.magnitude * (1.0 + 0.5 * column)
    return effect.magnitude * np.where(column >= 0, 1.0, -1.0)


def evaluate_natural(natural: NaturalSpec, x: np.ndarray, task: int) -> np.ndarray:
    if natural.function == NaturalFunction.CONSTANT:
        return np.full(x.shape[0], natural.base_rate)
    d = x.shape[1]
    return natural.base_rate + 0.1 * np.tanh(x[:, task % d] - x[:, (task + 1) % d])


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Tuple[UpliftDataset, OracleITE]:
    """
    Draw a randomized controlled trial with known effects.

    Features, treatment flag and secondary treatment are drawn independently;
    outcomes add the assigned effects to the natural response.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n, d, K, m = spec.sample_count, spec.n_features, spec.n_tasks, spec.n_treatments

    x = rng.standard_normal((n, d))
    if spec.discrete_features:
        codes = rng.integers(0, spec.discrete_levels, size=(n, spec.discrete_features))
        features = np.hstack([x, codes.astype(np.float64)])
    else:
        features = x

    treated = (rng.random(n) < spec.treatment_probability).astype(np.int64)
    assigned = rng.choice(m, size=n, p=spec.secondary_probabilities)
    secondary = np.where(treated == 1, assigned, -1)

    base = np.empty((n, K))
    incremental = np.empty((n, K, m))
    outcomes = np.empty((n, K))
    rows = np.arange(n)
    for k in range(K):
        base[:, k] = evaluate_effect(spec.base_effect, x, k)
        for j, effect in enumerate(spec.incremental_effects):
            incremental[:, k, j] = evaluate_effect(effect, x, k)
        received = treated * (base[:, k] + incremental[rows, k, np.maximum(secondary, 0)])
        mean = evaluate_natural(spec.natural, x, k) + received
        if spec.outcome_kind == OutcomeKind.BINARY:
            outcomes[:, k] = (rng.random(n) < np.clip(mean, 0.0, 1.0)).astype(np.float64)
        else:
            outcomes[:, k] = mean + spec.noise_sigma * rng.standard_normal(n)

    dataset = UpliftDataset(
        features=features,
        base_treatment=treated,
        secondary=secondary,
        outcomes=outcomes,
        row_ids=rows,
        schema=spec.schema(),
        treatment_count=m,
    )
    oracle = OracleITE(row_ids=rows.copy(), base=base, incremental=incremental)

    logger.info(
        f"Generated synthetic RCT: {n} samples, {int(treated.sum())} treated, "
        f"{K} tasks, {m} treatments (seed {seed})"
    )
    return dataset, oracle


# =============================================================================
# CSV INGESTION & EXPORT
# =============================================================================

def parse_numeric_column(series: pd.Series, allow_empty: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Convert a text column to float64 exactly (Python float parsing).

    Returns (values, bad_mask). Empty cells become NaN and are only bad when
    ``allow_empty`` is False.
    """
    values = np.empty(len(series), dtype=np.float64)
    bad = np.zeros(len(series), dtype=bool)
    for i, cell in enumerate(series.tolist()):
        text = str(cell).strip()
        if text == '':
            values[i] = np.nan
            bad[i] = not allow_empty
            continue
        try:
            values[i] = float(text)
        except ValueError:
            values[i] = np.nan
            bad[i] = True
            continue
        if not math.isfinite(values[i]):
            bad[i] = True
    return values, bad


def load_csv(
    path,
    schema: DatasetSchema,
    on_error: str = RowErrorPolicy.ABORT,
) -> UpliftDataset:
    """
    Read a UTF-8, comma-separated file with a header row.

    Columns are mapped by name. Unparseable rows, treated rows without a valid
    secondary treatment and control rows carrying one raise a row-level error
    with the file line number, or are skipped with a warning under the skip
    policy.
    """
    if on_error not in RowErrorPolicy.ALL:
        raise SpecError(f"Unknown row error policy '{on_error}'", 'on_error')
    path = Path(path)
    if not path.exists():
        raise DataSchemaError(f"Dataset file not found: {path}", details={'path': str(path)})

    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    logger.info(f"Loading {path}: {len(df)} rows")

    for column in schema.column_names:
        if column not in df.columns:
            raise DataSchemaError(f"Missing column '{column}' in {path.name}", column)

    parsed: Dict[str, np.ndarray] = {}
    bad_rows = np.zeros(len(df), dtype=bool)
    for column in schema.column_names:
        allow_empty = column == schema.secondary_treatment_column
        values, bad = parse_numeric_column(df[column], allow_empty=allow_empty)
        parsed[column] = values
        bad_rows |= bad

    flag = parsed[schema.base_treatment_column]
    bad_rows |= ~np.isin(flag, (0.0, 1.0))
    if schema.secondary_treatment_column:
        sec = parsed[schema.secondary_treatment_column]
        present = ~np.isnan(sec)
        bad_rows |= present & (sec != np.floor(sec))
        treated = flag == 1.0
        bad_rows |= treated & ~present
        bad_rows |= ~treated & present
        if schema.treatment_count is not None:
            bad_rows |= treated & present & ((sec < 0) | (sec >= schema.treatment_count))
        else:
            bad_rows |= treated & present & (sec < 0)

    if bad_rows.any():
        first = int(np.flatnonzero(bad_rows)[0])
        if on_error == RowErrorPolicy.ABORT:
            raise DataValidationError(
                f"Invalid row in {path.name} at line {first + 2}",
                row=first,
                line=first + 2,
            )
        logger.warning(f"Skipping {int(bad_rows.sum())} invalid rows in {path.name} (first at line {first + 2})")

    keep = ~bad_rows
    features = np.column_stack([parsed[name][keep] for name in schema.feature_names])
    base_treatment = parsed[schema.base_treatment_column][keep].astype(np.int64)
    if schema.secondary_treatment_column:
        sec = parsed[schema.secondary_treatment_column][keep]
        secondary = np.where(np.isnan(sec), -1, np.nan_to_num(sec, nan=-1.0)).astype(np.int64)
    else:
        secondary = np.where(base_treatment == 1, 0, -1)
    outcomes = np.column_stack([parsed[name][keep] for name in schema.outcome_columns])

    if ROW_ID_COLUMN in df.columns:
        ids, bad_ids = parse_numeric_column(df[ROW_ID_COLUMN][keep])
        if bad_ids.any():
            raise DataValidationError(f"Unparseable {ROW_ID_COLUMN} in {path.name}")
        row_ids = ids.astype(np.int64)
    else:
        row_ids = np.flatnonzero(keep)

    treatment_count = schema.treatment_count
    if treatment_count is None:
        treatment_count = int(secondary.max()) + 1 if (secondary >= 0).any() else 1

    return UpliftDataset(
        features=features,
        base_treatment=base_treatment,
        secondary=secondary,
        outcomes=outcomes,
        row_ids=row_ids,
        schema=schema,
        treatment_count=treatment_count,
    )


def _write_frame(frame: pd.DataFrame, path: Path) -> None:
    try:
        frame.to_csv(path, index=False, encoding='utf-8')
    except OSError as exc:
        raise DataProcessingError(f"Cannot write {path}: {exc}", step='write') from exc


def write_csv(dataset: UpliftDataset, path) -> Path:
    path = Path(path)
    _write_frame(dataset.to_frame(), path)
    logger.info(f"Wrote {len(dataset)} samples to {path}")
    return path


def write_oracle_csv(oracle: OracleITE, path) -> Path:
    path = Path(path)
    _write_frame(oracle.to_frame(), path)
    return path


def load_oracle_csv(path, n_tasks: int, n_treatments: int) -> OracleITE:
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    row_ids, _ = parse_numeric_column(df[ROW_ID_COLUMN])
    n = len(df)
    base = np.empty((n, n_tasks))
    incremental = np.empty((n, n_tasks, n_treatments))
    for k in range(n_tasks):
        base[:, k], _ = parse_numeric_column(df[f'base_task{k}'])
        for m in range(n_treatments):
            incremental[:, k, m], _ = parse_numeric_column(df[f'incremental_task{k}_treatment{m}'])
    return OracleITE(row_ids.astype(np.int64), base, incremental)


def write_manifest(spec: SyntheticSpec, seed: int, n_rows: int, path) -> Path:
    manifest = {
        'seed': int(seed),
        'rows': int(n_rows),
        'spec': spec.to_dict(),
    }
    return write_json(manifest, path)


def read_manifest(path) -> Tuple[SyntheticSpec, int]:
    manifest = read_json(path)
    return SyntheticSpec.from_dict(manifest['spec']), int(manifest['seed'])


# =============================================================================
# SPLITS, SCALING, BATCHES
# =============================================================================

def split(dataset: UpliftDataset, fractions: Sequence[float], seed: int) -> List[UpliftDataset]:
    """
    Seeded disjoint subsets of sizes floor(fraction * n); the rounding
    remainder goes to the first subset. Each subset keeps original row order.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise SpecError(f"Split fractions must be positive and sum to at most 1, got {fractions}", 'fractions')

    n = len(dataset)
    permutation = np.random.default_rng(seed).permutation(n)
    sizes = [int(math.floor(f * n + 1e-9)) for f in fractions]
    target = min(n, int(math.floor(sum(fractions) * n + 1e-9)))
    sizes[0] += target - sum(sizes)

    subsets = []
    offset = 0
    for size in sizes:
        indices = np.sort(permutation[offset:offset + size])
        subsets.append(dataset.subset(indices))
        offset += size
    return subsets


@dataclass
class FeatureScaler:
    """Z-score statistics for continuous columns, fitted on the training split."""

    mean: List[float]
    std: List[float]
    continuous: List[bool]

    @classmethod
    def fit(cls, dataset: UpliftDataset) -> 'FeatureScaler':
        mask = dataset.schema.continuous_mask
        mean = np.where(mask, dataset.features.mean(axis=0), 0.0)
        std = np.where(mask, dataset.features.std(axis=0), 1.0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean.tolist(), std.tolist(), mask.tolist())

    @classmethod
    def identity(cls, n_features: int) -> 'FeatureScaler':
        return cls([0.0] * n_features, [1.0] * n_features, [False] * n_features)

    def transform_array(self, features: np.ndarray) -> np.ndarray:
        if features.shape[1] != len(self.mean):
            raise DataSchemaError(
                f"Feature width {features.shape[1]} does not match scaler width {len(self.mean)}"
            )
        return (features - np.asarray(self.mean)) / np.asarray(self.std)

    def transform(self, dataset: UpliftDataset) -> UpliftDataset:
        return dataset.with_features(self.transform_array(dataset.features))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'FeatureScaler':
        return cls(**data)


@dataclass
class Batch:
    x: np.ndarray
    treated: np.ndarray
    secondary: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


def make_batch(dataset: UpliftDataset, indices: Optional[np.ndarray] = None) -> Batch:
    if indices is None:
        indices = np.arange(len(dataset))
    return Batch(
        x=dataset.features[indices],
        treated=dataset.base_treatment[indices].astype(np.float64),
        secondary=dataset.secondary[indices],
        y=dataset.outcomes[indices],
    )


def iter_batches(dataset: UpliftDataset, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Full permutation per call; the last batch may be short."""
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield make_batch(dataset, order[start:start + batch_size])
