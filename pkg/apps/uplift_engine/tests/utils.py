"""Shared fixtures for the uplift engine tests."""

import numpy as np

from apps.uplift_engine.services import diffcore as dc
from apps.uplift_engine.services.data_processor import DatasetSchema, FeatureColumn, UpliftDataset
from apps.uplift_engine.services.network import ModelConfig


def finite_difference(build_loss, arrays, step=1e-5):
    """Central differences of a scalar graph with respect to every entry of ``arrays``."""
    grads = {}
    for name, value in arrays.items():
        grad = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            original = value[idx]
            value[idx] = original + step
            up = float(build_loss({k: dc.Node.leaf(v, k) for k, v in arrays.items()}).value[0, 0])
            value[idx] = original - step
            down = float(build_loss({k: dc.Node.leaf(v, k) for k, v in arrays.items()}).value[0, 0])
            value[idx] = original
            grad[idx] = (up - down) / (2 * step)
        grads[name] = grad
    return grads


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-8)


def make_dataset(features, treated, secondary, outcomes, treatment_count=1, row_ids=None):
    features = np.asarray(features, dtype=np.float64)
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if outcomes.ndim == 1:
        outcomes = outcomes.reshape(-1, 1)
    schema = DatasetSchema(
        features=[FeatureColumn(f'x{j}') for j in range(features.shape[1])],
        outcome_columns=[f'y{k}' for k in range(outcomes.shape[1])],
        treatment_count=treatment_count,
    )
    n = features.shape[0]
    return UpliftDataset(
        features=features,
        base_treatment=np.asarray(treated),
        secondary=np.asarray(secondary),
        outcomes=outcomes,
        row_ids=np.arange(n) if row_ids is None else np.asarray(row_ids),
        schema=schema,
        treatment_count=treatment_count,
    )


def random_rct(rng, n, d=3, n_tasks=1, n_treatments=2):
    treated = rng.integers(0, 2, size=n)
    secondary = np.where(treated == 1, rng.integers(0, n_treatments, size=n), -1)
    return make_dataset(
        rng.normal(size=(n, d)),
        treated,
        secondary,
        rng.normal(size=(n, n_tasks)),
        treatment_count=n_treatments,
    )


def small_config(**overrides):
    """A network small enough for hand checks: d=3, K=2, m=2, L=2, w=3."""
    values = dict(
        feature_dim=3,
        n_tasks=2,
        n_treatments=2,
        n_experts=2,
        expert_hidden=[4],
        token_count=2,
        token_width=3,
        treatment_embed_dim=2,
        attention_dim=4,
        enhancer_hidden=[5],
    )
    values.update(overrides)
    return ModelConfig(**values)
