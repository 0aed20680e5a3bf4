"""
Uplift Metrics Service
======================
Ranking-based evaluation of uplift scores on randomized data.

Units are ranked by descending score with ties broken by ascending original
index. From the cumulative treated/control counts and outcome sums of every
prefix we build:

- the QINI curve  q(i) = Y_T(i) - Y_C(i) * N_T(i) / N_C(i), plotted as (i/n, q(i)/n)
- the uplift curve u(i) = (Y_T(i)/N_T(i) - Y_C(i)/N_C(i)) * i/n

Each coefficient is the trapezoidal area between the curve and the straight
line from the origin to the curve's end point (random targeting).
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from apps.uplift_engine.constants import (
    CURVES_DIRNAME,
    DEFAULT_LIFT_FRACTION,
    EFFECTS_RAW_FILENAME,
    EFFECTS_SUMMARY_FILENAME,
    REPORT_CSV_FILENAME,
    REPORT_TEXT_FILENAME,
    ROW_ID_COLUMN,
)
from apps.uplift_engine.services.data_processor import OracleITE, UpliftDataset
from utils.decorators import log_stage_time
from utils.exceptions import MetricError
from utils.helpers import ensure_directory, format_metric

logger = logging.getLogger(__name__)

DECILES = tuple(range(10, 100, 10))


# =============================================================================
# COHORTS
# =============================================================================

@dataclass(frozen=True)
class RankedCohort:
    """Units sorted best-first; ``index`` holds each unit's original position or id."""

    score: np.ndarray
    treated: np.ndarray
    outcome: np.ndarray
    index: np.ndarray

    @classmethod
    def from_scores(
        cls,
        scores: Sequence[float],
        treated: Sequence[int],
        outcomes: Sequence[float],
        index: Optional[Sequence[int]] = None,
    ) -> 'RankedCohort':
        scores = np.asarray(scores, dtype=np.float64).ravel()
        treated = np.asarray(treated).astype(np.int64).ravel()
        outcomes = np.asarray(outcomes, dtype=np.float64).ravel()
        index = np.arange(scores.size) if index is None else np.asarray(index, dtype=np.int64).ravel()
        if scores.size == 0:
            raise MetricError("Cannot rank an empty cohort")
        if not (scores.size == treated.size == outcomes.size == index.size):
            raise MetricError(
                f"Cohort columns disagree in length: scores {scores.size}, treated {treated.size}, "
                f"outcomes {outcomes.size}, index {index.size}"
            )
        if np.isnan(scores).any():
            raise MetricError("Scores contain NaN")
        if not np.isin(treated, (0, 1)).all():
            raise MetricError("Treatment indicators must be 0 or 1")

        order = np.lexsort((index, -scores))
        return cls(scores[order], treated[order], outcomes[order], index[order])

    def __len__(self) -> int:
        return self.score.size

    @property
    def n_treated(self) -> int:
        return int(self.treated.sum())

    @property
    def n_control(self) -> int:
        return len(self) - self.n_treated

    def require_both_groups(self) -> None:
        if self.n_treated == 0:
            raise MetricError("Cohort has no treated units")
        if self.n_control == 0:
            raise MetricError("Cohort has no control units")


@dataclass(frozen=True)
class PrefixStats:
    """Cumulative counts and outcome sums; entry i covers the top i units (entry 0 is empty)."""

    n_treated: np.ndarray
    n_control: np.ndarray
    y_treated: np.ndarray
    y_control: np.ndarray

    @classmethod
    def from_cohort(cls, cohort: RankedCohort) -> 'PrefixStats':
        t = cohort.treated.astype(np.float64)
        c = 1.0 - t

        def cumulative(values):
            return np.concatenate([[0.0], np.cumsum(values)])

        return cls(
            n_treated=cumulative(t),
            n_control=cumulative(c),
            y_treated=cumulative(t * cohort.outcome),
            y_control=cumulative(c * cohort.outcome),
        )

    @property
    def size(self) -> int:
        return self.n_treated.size - 1


@dataclass(frozen=True)
class Curve:
    fractions: np.ndarray
    values: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'fraction': self.fractions, 'value': self.values})


def _area_above_diagonal(values: np.ndarray) -> float:
    """Trapezoid area from (0, 0) through (i/n, values[i-1]) minus the chord to the end point."""
    n = values.size
    padded = np.concatenate([[0.0], values])
    area = float((padded[:-1] + padded[1:]).sum()) / (2.0 * n)
    return area - float(values[-1]) / 2.0


# =============================================================================
# METRICS
# =============================================================================

def qini_values(stats: PrefixStats) -> np.ndarray:
    """q(i) for i = 1..n."""
    nt, nc = stats.n_treated[1:], stats.n_control[1:]
    yt, yc = stats.y_treated[1:], stats.y_control[1:]
    ratio = np.divide(nt, nc, out=np.zeros_like(nt), where=nc > 0)
    return yt - yc * ratio


def uplift_values(stats: PrefixStats) -> np.ndarray:
    """u(i) for i = 1..n; zero while either group is still empty."""
    n = stats.size
    nt, nc = stats.n_treated[1:], stats.n_control[1:]
    yt, yc = stats.y_treated[1:], stats.y_control[1:]
    both = (nt > 0) & (nc > 0)
    mean_t = np.divide(yt, nt, out=np.zeros_like(yt), where=both)
    mean_c = np.divide(yc, nc, out=np.zeros_like(yc), where=both)
    fractions = np.arange(1, n + 1) / n
    return np.where(both, (mean_t - mean_c) * fractions, 0.0)


def qini(cohort: RankedCohort) -> Tuple[float, Curve]:
    """Normalized QINI coefficient and curve."""
    cohort.require_both_groups()
    stats = PrefixStats.from_cohort(cohort)
    n = stats.size
    values = qini_values(stats) / n
    return _area_above_diagonal(values), Curve(np.arange(1, n + 1) / n, values)


def auuc(cohort: RankedCohort) -> Tuple[float, Curve]:
    """Normalized area under the uplift curve and the curve."""
    cohort.require_both_groups()
    stats = PrefixStats.from_cohort(cohort)
    n = stats.size
    values = uplift_values(stats)
    return _area_above_diagonal(values), Curve(np.arange(1, n + 1) / n, values)


def top_count(n: int, fraction: float) -> int:
    # round first so 0.3 * 10 counts as 3 rather than 4
    return min(n, max(1, math.ceil(round(fraction * n, 9))))


def lift_at_k(cohort: RankedCohort, k: float = DEFAULT_LIFT_FRACTION) -> float:
    """Treated minus control mean outcome among the top ceil(k*n) units."""
    if not 0.0 < k <= 1.0:
        raise MetricError(f"Lift fraction must be in (0, 1], got {k}")
    top = top_count(len(cohort), k)
    treated = cohort.treated[:top] == 1
    outcome = cohort.outcome[:top]
    if not treated.any() or treated.all():
        missing = 'control' if treated.all() else 'treated'
        raise MetricError(f"Top {top} units contain no {missing} units")
    return float(outcome[treated].mean() - outcome[~treated].mean())


# =============================================================================
# EVALUATION REPORT
# =============================================================================

@dataclass
class MetricRow:
    task: int
    treatment: int
    n_units: int
    n_treated: int
    n_control: int
    qini: float
    auuc: float
    lift: float
    qini_curve: Curve = field(repr=False)
    auuc_curve: Curve = field(repr=False)


@dataclass
class EvaluationReport:
    """Per task x treatment metrics with their curves."""

    method: str
    lift_fraction: float
    rows: List[MetricRow] = field(default_factory=list)

    @property
    def lift_column(self) -> str:
        return f'lift_at_{int(round(self.lift_fraction * 100))}'

    def get(self, task: int, treatment: int) -> MetricRow:
        for row in self.rows:
            if row.task == task and row.treatment == treatment:
                return row
        raise KeyError((task, treatment))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    'task': row.task,
                    'treatment': row.treatment,
                    'n_units': row.n_units,
                    'n_treated': row.n_treated,
                    'n_control': row.n_control,
                    'qini': row.qini,
                    'auuc': row.auuc,
                    self.lift_column: row.lift,
                }
                for row in self.rows
            ],
            columns=['task', 'treatment', 'n_units', 'n_treated', 'n_control', 'qini', 'auuc', self.lift_column],
        )

    def to_text(self) -> str:
        lines = [f'method = {self.method}', f'lift_fraction = {self.lift_fraction}']
        for row in self.rows:
            prefix = f'task{row.task}.treatment{row.treatment}'
            lines += [
                f'{prefix}.n_units = {row.n_units}',
                f'{prefix}.n_treated = {row.n_treated}',
                f'{prefix}.n_control = {row.n_control}',
                f'{prefix}.qini = {format_metric(row.qini, 9)}',
                f'{prefix}.auuc = {format_metric(row.auuc, 9)}',
                f'{prefix}.{self.lift_column} = {format_metric(row.lift, 9)}',
            ]
        return '\n'.join(lines) + '\n'

    def write(self, output_dir) -> Path:
        output_dir = ensure_directory(output_dir)
        self.to_frame().to_csv(output_dir / REPORT_CSV_FILENAME, index=False)
        (output_dir / REPORT_TEXT_FILENAME).write_text(self.to_text(), encoding='utf-8')
        curves = ensure_directory(output_dir / CURVES_DIRNAME)
        for row in self.rows:
            stem = f'task{row.task}_treatment{row.treatment}'
            row.qini_curve.to_frame().to_csv(curves / f'{stem}_qini.csv', index=False)
            row.auuc_curve.to_frame().to_csv(curves / f'{stem}_auuc.csv', index=False)
        logger.info(f"Wrote {self.method} report with {len(self.rows)} rows to {output_dir}")
        return output_dir


@log_stage_time('metrics')
def evaluate(
    scores: np.ndarray,
    dataset: UpliftDataset,
    method: str = 'model',
    lift_fraction: float = DEFAULT_LIFT_FRACTION,
) -> EvaluationReport:
    """
    Evaluate Gamma scores (n x K x m) treatment by treatment: the cohort for
    treatment m is every control unit plus the recipients of m, ranked by
    Gamma^k_m. Ties break on row id, so permuting rows leaves the report unchanged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(dataset)
    if scores.ndim != 3 or scores.shape[0] != n:
        raise MetricError(f"Scores of shape {scores.shape} do not cover {n} units")
    if scores.shape[1] != dataset.n_tasks:
        raise MetricError(f"Scores have {scores.shape[1]} tasks, dataset has {dataset.n_tasks}")
    if scores.shape[2] < dataset.treatment_count:
        raise MetricError(f"Scores have {scores.shape[2]} treatments, dataset has {dataset.treatment_count}")

    report = EvaluationReport(method=method, lift_fraction=lift_fraction)
    control = dataset.base_treatment == 0
    for t in range(dataset.treatment_count):
        members = np.flatnonzero(control | (dataset.secondary == t))
        if members.size == 0:
            raise MetricError(f"Restricted cohort for treatment {t} is empty", treatment=t)
        treated = dataset.base_treatment[members]
        for k in range(dataset.n_tasks):
            cohort = RankedCohort.from_scores(
                scores[members, k, t], treated, dataset.outcomes[members, k], dataset.row_ids[members],
            )
            try:
                qini_coefficient, qini_curve = qini(cohort)
                auuc_coefficient, auuc_curve = auuc(cohort)
                lift = lift_at_k(cohort, lift_fraction)
            except MetricError as exc:
                raise MetricError(f"Treatment {t}, task {k}: {exc.message}", treatment=t, task=k) from exc
            report.rows.append(MetricRow(
                task=k,
                treatment=t,
                n_units=len(cohort),
                n_treated=cohort.n_treated,
                n_control=cohort.n_control,
                qini=qini_coefficient,
                auuc=auuc_coefficient,
                lift=lift,
                qini_curve=qini_curve,
                auuc_curve=auuc_curve,
            ))
            logger.debug(f"{method} task {k} treatment {t}: qini {qini_coefficient:.6f}, auuc {auuc_coefficient:.6f}")
    return report


# =============================================================================
# REFERENCE SCORERS
# =============================================================================

def oracle_scores(oracle: OracleITE, dataset: UpliftDataset) -> np.ndarray:
    """True composed effects aligned with the dataset's rows."""
    missing = np.setdiff1d(dataset.row_ids, oracle.row_ids)
    if missing.size:
        raise MetricError(f"Oracle file lacks {missing.size} row ids, first {int(missing[0])}")
    return oracle.take(dataset.row_ids).composed()


def random_scores(n: int, n_tasks: int, n_treatments: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 2]).random((n, n_tasks, n_treatments))


# =============================================================================
# EFFECT DISTRIBUTIONS
# =============================================================================

@dataclass
class EffectDistributions:
    """Summary table (one row per quantity/task/treatment) plus per-sample values."""

    summary: pd.DataFrame
    raw: pd.DataFrame

    def write(self, output_dir) -> None:
        output_dir = ensure_directory(output_dir)
        self.summary.to_csv(output_dir / EFFECTS_SUMMARY_FILENAME, index=False)
        self.raw.to_csv(output_dir / EFFECTS_RAW_FILENAME, index=False)


def _summarise(quantity: str, task: int, treatment: Optional[int], values: np.ndarray) -> Dict:
    row = {
        'quantity': quantity,
        'task': task,
        'treatment': -1 if treatment is None else treatment,
        'mean': float(values.mean()),
        'mean_abs': float(np.abs(values).mean()),
        'std': float(values.std()),
    }
    for p, value in zip(DECILES, np.percentile(values, DECILES)):
        row[f'p{p}'] = float(value)
    return row


def effect_distributions(
    row_ids: np.ndarray,
    base: Optional[np.ndarray],
    incremental: Optional[np.ndarray],
) -> EffectDistributions:
    """
    Summaries of the base uplift (n x K) and of each incremental uplift
    (n x K x m). Either part may be absent for reduced model variants.
    """
    rows = []
    raw = pd.DataFrame({ROW_ID_COLUMN: np.asarray(row_ids)})
    n_tasks = base.shape[1] if base is not None else incremental.shape[1]
    for k in range(n_tasks):
        if base is not None:
            rows.append(_summarise('base', k, None, base[:, k]))
            raw[f'base_task{k}'] = base[:, k]
        if incremental is not None:
            for t in range(incremental.shape[2]):
                rows.append(_summarise('incremental', k, t, incremental[:, k, t]))
                raw[f'incremental_task{k}_treatment{t}'] = incremental[:, k, t]
    return EffectDistributions(summary=pd.DataFrame(rows), raw=raw)
