"""Synthetic drifting-preference streams.

Each entity owns a hidden weight vector that performs a seeded random
walk across phases; every example draws sparse features, scores them
against the fixed-plus-entity truth and samples a Bernoulli label from
the logistic probability.  Entity traffic is skewed so a few entities
are data-rich while the tail sees only a handful of examples per phase,
which is exactly the regime where refitting on the newest slice alone
forgets the past.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .model import LabeledExample, PhaseDataset, SparseVector

__all__ = ["DriftGenConfig", "DriftTruth", "generate_drift_stream"]


@dataclass(frozen=True)
class DriftGenConfig:
    seed: int = 0
    n_entities: int = 200
    feature_dim: int = 50
    examples_per_phase: int = 4000
    n_phases: int = 5
    drift_rate: float = 0.05
    entity_activity_skew: float = 0.8
    nnz_per_example: int = 6
    fixed_effect_scale: float = 0.3
    entity_effect_scale: float = 0.9
    entity_type: str = "member"

    def validate(self) -> None:
        positive = (
            self.n_entities,
            self.feature_dim,
            self.examples_per_phase,
            self.n_phases,
            self.nnz_per_example,
        )
        if any(v < 1 for v in positive):
            raise ValidationError("all size parameters must be positive")
        if self.drift_rate < 0 or self.entity_activity_skew < 0:
            raise ValidationError("drift_rate and activity skew must be >= 0")
        if self.nnz_per_example > self.feature_dim:
            raise ValidationError("nnz_per_example cannot exceed feature_dim")


@dataclass(frozen=True)
class DriftTruth:
    """Hidden generating state, kept for oracle checks."""

    fixed_weights: np.ndarray
    entity_weights: tuple[np.ndarray, ...]  # one (n_entities, p) snapshot per phase
    probabilities: tuple[np.ndarray, ...]  # per-example Bernoulli means per phase
    entity_rows: tuple[np.ndarray, ...]  # per-example entity index per phase


def _entity_id(config: DriftGenConfig, index: int) -> str:
    return f"{config.entity_type[0]}{index:05d}"


def generate_drift_stream(
    config: DriftGenConfig,
) -> tuple[list[PhaseDataset], DriftTruth]:
    """Deterministically generate the stream and its hidden truth."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    p = config.feature_dim
    n = config.examples_per_phase
    k = config.nnz_per_example

    fixed_true = rng.normal(0.0, config.fixed_effect_scale, size=p)
    entity_true = rng.normal(
        0.0, config.entity_effect_scale, size=(config.n_entities, p)
    )
    activity = (1.0 + np.arange(config.n_entities)) ** (-config.entity_activity_skew)
    activity /= activity.sum()

    phases: list[PhaseDataset] = []
    snapshots, probabilities, entity_rows = [], [], []
    for t in range(config.n_phases):
        if t > 0 and config.drift_rate > 0:
            entity_true = entity_true + config.drift_rate * rng.normal(
                size=entity_true.shape
            )
        snapshots.append(entity_true.copy())

        owners = rng.choice(config.n_entities, size=n, p=activity)
        # k distinct indices per row without a Python loop
        index_matrix = np.argsort(rng.random((n, p)), axis=1)[:, :k]
        index_matrix.sort(axis=1)
        values = rng.normal(size=(n, k))
        combined = fixed_true[np.newaxis, :] + entity_true[owners]
        scores = np.einsum("nk,nk->n", values, np.take_along_axis(combined, index_matrix, 1))
        probs = expit(scores)
        labels = (rng.random(n) < probs).astype(int)

        examples = [
            LabeledExample(
                SparseVector(index_matrix[i], values[i], p),
                int(labels[i]),
                {config.entity_type: _entity_id(config, int(owners[i]))},
            )
            for i in range(n)
        ]
        phases.append(PhaseDataset(t, examples, p))
        probabilities.append(probs)
        entity_rows.append(owners)

    truth = DriftTruth(
        fixed_weights=fixed_true,
        entity_weights=tuple(snapshots),
        probabilities=tuple(probabilities),
        entity_rows=tuple(entity_rows),
    )
    return phases, truth
