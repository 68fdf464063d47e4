"""Objective functions for one training round.

The incremental objective is the summed logistic negative
log-likelihood of the current phase plus a quadratic penalty anchored
at the previous round's posterior:

    L(w) = nll(w; D_t) + (lambda_f / 2) (w - w_prev)^T H_prev (w - w_prev)

Losses are summed, never averaged: precision chaining across rounds
only balances in summed scale.  Everything here minimizes (negative
log-posterior convention).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError
from .hessian import (
    DiagonalHessian,
    FullHessian,
    HessianRepr,
    PriorDistribution,
    hvp,
)
from .model import PhaseDataset, SparseVector, sigmoid_array

__all__ = [
    "ObjectiveEvaluation",
    "QuadraticLossSpec",
    "logistic_nll",
    "prior_penalty",
    "incremental_objective",
    "quadratic_oracle_loss",
]


@dataclass(frozen=True)
class ObjectiveEvaluation:
    """Value and dense gradient of an objective at one point."""

    value: float
    gradient: np.ndarray

    def __add__(self, other: "ObjectiveEvaluation") -> "ObjectiveEvaluation":
        if self.gradient.shape != other.gradient.shape:
            raise ShapeError("cannot add evaluations of different dimension")
        return ObjectiveEvaluation(self.value + other.value, self.gradient + other.gradient)

    def __iter__(self):
        return iter((self.value, self.gradient))


def _as_dense(w, dim: int) -> np.ndarray:
    if isinstance(w, SparseVector):
        if w.dim != dim:
            raise ShapeError(f"weight dim {w.dim} vs expected {dim}")
        return w.to_dense()
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (dim,):
        raise ShapeError(f"weights must have shape ({dim},), got {w.shape}")
    return w


def logistic_nll(w, data: PhaseDataset) -> ObjectiveEvaluation:
    """Summed logistic negative log-likelihood and its gradient.

    Per-example offsets enter the logit additively.  The value uses the
    log1p-exp form on the stable branch, so widely separated scores do
    not overflow.
    """
    dense = _as_dense(w, data.feature_dim)
    if len(data) == 0:
        return ObjectiveEvaluation(0.0, np.zeros(data.feature_dim))
    y = data.labels
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValidationError("labels must be binary")
    z = data.feature_matrix @ dense + data.offsets
    # log(1 + e^{-z}) * y + log(1 + e^{z}) * (1 - y), computed stably
    value = float(np.sum(y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)))
    residual = sigmoid_array(z) - y
    gradient = np.asarray(data.feature_matrix.T @ residual).ravel()
    if not np.isfinite(value) or not np.all(np.isfinite(gradient)):
        raise NumericalError("non-finite logistic loss evaluation")
    return ObjectiveEvaluation(value, gradient)


def prior_penalty(w, prior: PriorDistribution, lambda_f: float) -> ObjectiveEvaluation:
    """Quadratic anchor to the previous posterior.

    value = (lambda_f / 2) d^T H d and gradient = lambda_f * H d with
    d = w - prior.mean; H is applied through whatever representation the
    prior carries.
    """
    if lambda_f < 0:
        raise ValidationError("lambda_f must be >= 0")
    dense = _as_dense(w, prior.dim)
    if lambda_f == 0.0:
        return ObjectiveEvaluation(0.0, np.zeros(prior.dim))
    d = dense - prior.mean_dense()
    hd = hvp(prior.precision, d)
    return ObjectiveEvaluation(0.5 * lambda_f * float(d @ hd), lambda_f * hd)


def incremental_objective(
    w, data: PhaseDataset, prior: PriorDistribution, lambda_f: float
) -> ObjectiveEvaluation:
    """Current-phase likelihood plus the forgetting-weighted prior anchor."""
    if data.feature_dim != prior.dim:
        raise ShapeError(f"data dim {data.feature_dim} vs prior dim {prior.dim}")
    return logistic_nll(w, data) + prior_penalty(w, prior, lambda_f)


class QuadraticLossSpec:
    """Explicit quadratic objective (1/2) w^T A w - b^T w.

    Exactness oracle: on quadratics the second-order expansion of the
    past loss is exact, so sequential updates with the full Hessian must
    reproduce batch training bit-for-bit (up to solver tolerance).
    """

    __slots__ = ("matrix", "linear")

    def __init__(self, matrix: Union[HessianRepr, np.ndarray], linear) -> None:
        if isinstance(matrix, np.ndarray):
            matrix = FullHessian(matrix)
        if not isinstance(matrix, (FullHessian, DiagonalHessian)):
            raise ValidationError("quadratic matrix must be full or diagonal")
        if isinstance(matrix, FullHessian) and matrix.dim:
            eigmin = float(np.linalg.eigvalsh(matrix.matrix).min())
            if eigmin < -1e-10 * max(1.0, float(np.abs(matrix.matrix).max())):
                raise ValidationError("quadratic matrix must be positive semidefinite")
        linear = np.asarray(linear, dtype=np.float64)
        if linear.shape != (matrix.dim,):
            raise ShapeError("linear term must match the matrix dimension")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "linear", linear)

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("QuadraticLossSpec is immutable")

    @property
    def dim(self) -> int:
        return self.matrix.dim


def quadratic_oracle_loss(w, spec: QuadraticLossSpec) -> ObjectiveEvaluation:
    """Evaluate (1/2) w^T A w - b^T w and its gradient A w - b."""
    dense = _as_dense(w, spec.dim)
    aw = hvp(spec.matrix, dense)
    value = 0.5 * float(dense @ aw) - float(spec.linear @ dense)
    return ObjectiveEvaluation(value, aw - spec.linear)
