"""Core value types and scoring for sparse GLMs and mixed-effects models.

A mixed-effects model is one global (fixed-effects) GLM plus per-entity
(random-effects) GLMs; the logit of the combined model is the sum of the
component logits.  All types here are immutable values: construct once,
share freely.
"""

from __future__ import annotations

import math
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import ShapeError, ValidationError

__all__ = [
    "SparseVector",
    "LabeledExample",
    "PhaseDataset",
    "GlmModel",
    "GlmixModel",
    "sigmoid",
    "glm_score",
    "glmix_score",
    "glm_score_dataset",
    "glmix_score_dataset",
    "merge_phases",
]


class SparseVector:
    """Immutable sparse real vector stored as (index, value) pairs.

    Canonical form: indices strictly increasing, every index < ``dim``,
    and no explicitly stored zeros.  The direct constructor enforces the
    canonical form; use :meth:`from_pairs` to canonicalize arbitrary
    input (duplicate indices are summed, zeros dropped).
    """

    __slots__ = ("indices", "values", "dim")

    def __init__(self, indices, values, dim: int) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if indices.ndim != 1 or values.ndim != 1 or indices.shape != values.shape:
            raise ShapeError("indices and values must be 1-d arrays of equal length")
        if int(dim) < 0:
            raise ValidationError("dim must be non-negative")
        if indices.size:
            if indices[0] < 0 or indices[-1] >= dim or np.any(np.diff(indices) <= 0):
                raise ValidationError(
                    "indices must be strictly increasing and within [0, dim)"
                )
            if np.any(values == 0.0):
                raise ValidationError("canonical form stores no zero values")
            if not np.all(np.isfinite(values)):
                raise ValidationError("values must be finite")
        indices.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dim", int(dim))

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("SparseVector is immutable")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]], dim: int) -> "SparseVector":
        """Canonicalize arbitrary (index, value) pairs: sort, merge, drop zeros."""
        pairs = list(pairs)
        if not pairs:
            return cls.zeros(dim)
        idx = np.asarray([p[0] for p in pairs], dtype=np.int64)
        val = np.asarray([p[1] for p in pairs], dtype=np.float64)
        order = np.argsort(idx, kind="stable")
        idx, val = idx[order], val[order]
        uniq, inverse = np.unique(idx, return_inverse=True)
        merged = np.zeros(uniq.size, dtype=np.float64)
        np.add.at(merged, inverse, val)
        keep = merged != 0.0
        return cls(uniq[keep], merged[keep], dim)

    @classmethod
    def from_dense(cls, dense, dim: Optional[int] = None) -> "SparseVector":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 1:
            raise ShapeError("dense input must be 1-d")
        if dim is None:
            dim = dense.size
        idx = np.nonzero(dense)[0]
        return cls(idx, dense[idx], dim)

    @classmethod
    def zeros(cls, dim: int) -> "SparseVector":
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64), dim)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(v)) for i, v in zip(self.indices, self.values)]

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float64)
        out[self.indices] = self.values
        return out

    def dot(self, other) -> float:
        """Dot product with another SparseVector or a dense vector."""
        if isinstance(other, SparseVector):
            if other.dim != self.dim:
                raise ShapeError(f"dim mismatch: {self.dim} vs {other.dim}")
            i = j = 0
            acc = 0.0
            si, sv, oi, ov = self.indices, self.values, other.indices, other.values
            while i < si.size and j < oi.size:
                if si[i] == oi[j]:
                    acc += sv[i] * ov[j]
                    i += 1
                    j += 1
                elif si[i] < oi[j]:
                    i += 1
                else:
                    j += 1
            return float(acc)
        other = np.asarray(other, dtype=np.float64)
        if other.shape != (self.dim,):
            raise ShapeError(f"dense operand must have shape ({self.dim},)")
        return float(np.dot(self.values, other[self.indices]))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparseVector)
            and self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.dim, self.indices.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        return f"SparseVector({self.pairs()!r}, dim={self.dim})"


class LabeledExample:
    """One binary-labeled observation.

    ``offset`` is a fixed additive logit contribution from other model
    components (the residual-training device); it enters every likelihood
    evaluation but is not part of the example's features.
    """

    __slots__ = ("features", "label", "entity_ids", "offset")

    def __init__(
        self,
        features: SparseVector,
        label: int,
        entity_ids: Optional[Mapping[str, str]] = None,
        offset: float = 0.0,
    ) -> None:
        if label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {label!r}")
        offset = float(offset)
        if not math.isfinite(offset):
            raise ValidationError("offset must be finite")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "label", int(label))
        object.__setattr__(self, "entity_ids", dict(entity_ids or {}))
        object.__setattr__(self, "offset", offset)

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("LabeledExample is immutable")

    def with_offset(self, offset: float) -> "LabeledExample":
        return LabeledExample(self.features, self.label, self.entity_ids, offset)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabeledExample)
            and self.features == other.features
            and self.label == other.label
            and self.entity_ids == other.entity_ids
            and self.offset == other.offset
        )

    def __repr__(self) -> str:
        return (
            f"LabeledExample(label={self.label}, entity_ids={self.entity_ids!r}, "
            f"offset={self.offset}, features={self.features!r})"
        )


class PhaseDataset:
    """One time-slice of the example stream.

    Immutable after construction; the design matrix, label vector and
    offset vector are materialized lazily and cached, so repeated loss
    evaluations against the same dataset are cheap.
    """

    def __init__(
        self,
        phase_index: int,
        examples: Sequence[LabeledExample],
        feature_dim: int,
    ) -> None:
        if phase_index < 0:
            raise ValidationError("phase_index must be non-negative")
        examples = tuple(examples)
        for k, ex in enumerate(examples):
            if ex.features.dim != feature_dim:
                raise ShapeError(
                    f"example {k} has feature dim {ex.features.dim}, expected {feature_dim}"
                )
        self.phase_index = int(phase_index)
        self.examples = examples
        self.feature_dim = int(feature_dim)

    def __len__(self) -> int:
        return len(self.examples)

    @cached_property
    def feature_matrix(self) -> sp.csr_matrix:
        """CSR design matrix, one row per example."""
        indptr = np.zeros(len(self.examples) + 1, dtype=np.int64)
        for k, ex in enumerate(self.examples):
            indptr[k + 1] = indptr[k] + ex.features.nnz
        indices = np.empty(indptr[-1], dtype=np.int64)
        data = np.empty(indptr[-1], dtype=np.float64)
        for k, ex in enumerate(self.examples):
            indices[indptr[k] : indptr[k + 1]] = ex.features.indices
            data[indptr[k] : indptr[k + 1]] = ex.features.values
        return sp.csr_matrix(
            (data, indices, indptr), shape=(len(self.examples), self.feature_dim)
        )

    @cached_property
    def labels(self) -> np.ndarray:
        return np.asarray([ex.label for ex in self.examples], dtype=np.float64)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.asarray([ex.offset for ex in self.examples], dtype=np.float64)

    def with_offsets(self, offsets) -> "PhaseDataset":
        """Copy of the dataset with per-example offsets replaced."""
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.shape != (len(self.examples),):
            raise ShapeError("offsets must have one entry per example")
        replaced = [ex.with_offset(o) for ex, o in zip(self.examples, offsets)]
        return PhaseDataset(self.phase_index, replaced, self.feature_dim)

    def subset(self, row_indices, phase_index: Optional[int] = None) -> "PhaseDataset":
        picked = [self.examples[i] for i in row_indices]
        return PhaseDataset(
            self.phase_index if phase_index is None else phase_index,
            picked,
            self.feature_dim,
        )

    def __repr__(self) -> str:
        return (
            f"PhaseDataset(phase_index={self.phase_index}, n={len(self.examples)}, "
            f"feature_dim={self.feature_dim})"
        )


def merge_phases(phases: Sequence[PhaseDataset]) -> PhaseDataset:
    """Concatenate phases into one training window (keeps the last index)."""
    phases = list(phases)
    if not phases:
        raise ValidationError("cannot merge an empty window")
    dim = phases[0].feature_dim
    for ph in phases:
        if ph.feature_dim != dim:
            raise ShapeError("phases in a window must share feature_dim")
    examples: list[LabeledExample] = []
    for ph in phases:
        examples.extend(ph.examples)
    return PhaseDataset(phases[-1].phase_index, examples, dim)


class GlmModel:
    """A single GLM: weight vector plus its cold-start ridge strength.

    ``l2_base`` is the precision of the zero-mean Gaussian prior used
    when the model is trained without any earlier posterior.
    """

    __slots__ = ("weights", "l2_base")

    def __init__(self, weights: SparseVector, l2_base: float = 1.0) -> None:
        if l2_base < 0:
            raise ValidationError("l2_base must be non-negative")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "l2_base", float(l2_base))

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("GlmModel is immutable")

    @classmethod
    def zeros(cls, dim: int, l2_base: float = 1.0) -> "GlmModel":
        return cls(SparseVector.zeros(dim), l2_base)

    @property
    def dim(self) -> int:
        return self.weights.dim

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GlmModel)
            and self.weights == other.weights
            and self.l2_base == other.l2_base
        )

    def __repr__(self) -> str:
        return f"GlmModel(dim={self.dim}, nnz={self.weights.nnz}, l2_base={self.l2_base})"


class GlmixModel:
    """Fixed-effects GLM plus per-entity-type maps of random-effects GLMs.

    Scoring an example sums the fixed logit with the logit of the matched
    model for each entity type; an entity id with no trained model
    contributes exactly zero, so a never-seen entity behaves like a
    freshly cold-started one.
    """

    __slots__ = ("fixed", "random_effects")

    def __init__(
        self,
        fixed: GlmModel,
        random_effects: Optional[Mapping[str, Mapping[str, GlmModel]]] = None,
    ) -> None:
        frozen = {
            etype: dict(models) for etype, models in (random_effects or {}).items()
        }
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "random_effects", frozen)

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("GlmixModel is immutable")

    def entity_types(self) -> list[str]:
        return sorted(self.random_effects)

    def with_fixed(self, fixed: GlmModel) -> "GlmixModel":
        return GlmixModel(fixed, self.random_effects)

    def with_random_effects(
        self, entity_type: str, models: Mapping[str, GlmModel]
    ) -> "GlmixModel":
        updated = dict(self.random_effects)
        updated[entity_type] = dict(models)
        return GlmixModel(self.fixed, updated)

    def __repr__(self) -> str:
        sizes = {t: len(m) for t, m in self.random_effects.items()}
        return f"GlmixModel(fixed={self.fixed!r}, random_effects={sizes})"


def sigmoid(z: float) -> float:
    """Numerically stable logistic function of a finite scalar.

    Uses the saturating branch of ``expit`` so large |z| neither
    overflows nor produces NaN.
    """
    z = float(z)
    if not math.isfinite(z):
        raise ValidationError(f"sigmoid requires finite input, got {z!r}")
    return float(expit(z))


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    """Vectorized stable sigmoid (no domain check; internal hot path)."""
    return expit(z)


def glm_score(model: GlmModel, features: SparseVector, offset: float = 0.0) -> float:
    """Logit of one example under a single GLM: w.x + offset."""
    if features.dim != model.dim:
        raise ShapeError(f"feature dim {features.dim} vs model dim {model.dim}")
    return model.weights.dot(features) + float(offset)


def glmix_score(model: GlmixModel, example: LabeledExample) -> float:
    """Summed logit of the fixed model and every matched entity model.

    Entity ids absent from the corresponding map (or entity types the
    example does not carry) contribute zero.
    """
    score = glm_score(model.fixed, example.features, 0.0)
    for etype, per_entity in model.random_effects.items():
        eid = example.entity_ids.get(etype)
        if eid is None:
            continue
        sub = per_entity.get(eid)
        if sub is not None:
            score += glm_score(sub, example.features, 0.0)
    return score


def glm_score_dataset(
    model: GlmModel, data: PhaseDataset, include_offsets: bool = False
) -> np.ndarray:
    """Vectorized logits of a whole dataset under one GLM."""
    if data.feature_dim != model.dim:
        raise ShapeError(f"dataset dim {data.feature_dim} vs model dim {model.dim}")
    scores = data.feature_matrix @ model.weights.to_dense()
    if include_offsets:
        scores = scores + data.offsets
    return scores


def glmix_score_dataset(model: GlmixModel, data: PhaseDataset) -> np.ndarray:
    """Vectorized mixed-model logits; unmatched entities contribute zero."""
    scores = glm_score_dataset(model.fixed, data)
    for etype, per_entity in model.random_effects.items():
        if not per_entity:
            continue
        groups: dict[str, list[int]] = {}
        for row, ex in enumerate(data.examples):
            eid = ex.entity_ids.get(etype)
            if eid is not None and eid in per_entity:
                groups.setdefault(eid, []).append(row)
        X = data.feature_matrix
        for eid, rows in groups.items():
            w = per_entity[eid].weights.to_dense()
            scores[rows] += X[rows] @ w
    return scores
