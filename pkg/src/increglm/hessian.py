"""Curvature representations and their operator algebra.

Four interchangeable representations of a precision (an observed-loss
Hessian) are supported, trading accuracy for cost per Hessian-vector
product:

* full symmetric matrix, O(p^2) storage and apply cost;
* diagonal of the exact Hessian, O(p);
* a capped memory of optimizer steps and gradient differences, applied
  through a two-loop recursion, O(m*p);
* a bias-corrected second moment of stochastic gradients, O(p).

Everything is immutable after construction, so representations can be
shared across concurrent consumers.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    CapacityError,
    EmptyMemoryError,
    ShapeError,
    ValidationError,
)
from .model import PhaseDataset, SparseVector, sigmoid_array

__all__ = [
    "CURVATURE_EPS",
    "FULL_DIM_BUDGET",
    "MAX_DFP_MEMORY",
    "FullHessian",
    "DiagonalHessian",
    "DfpMemory",
    "AdamMoment",
    "HessianRepr",
    "PriorDistribution",
    "cold_start_prior",
    "logistic_hessian_full",
    "logistic_hessian_diag",
    "accumulate_precision",
    "scale_precision",
    "dfp_record",
    "dfp_hvp",
    "adam_second_moment_update",
    "adam_bias_corrected",
    "hvp",
    "hvp_counter",
]

# Positive-curvature threshold for admitting a (step, gradient-diff) pair.
CURVATURE_EPS = 1e-10
# Full matrices are refused above this dimension unless the caller raises it.
FULL_DIM_BUDGET = 4096
# Hard cap on the step memory; small memories are the point of the method.
MAX_DFP_MEMORY = 10


class OperationCounter:
    """Counts vector entries touched by Hessian-vector products.

    Test instrumentation for the per-variant cost contract; not used by
    library logic.
    """

    __slots__ = ("entries", "calls")

    def __init__(self) -> None:
        self.entries = 0
        self.calls = 0

    def add(self, n: int) -> None:
        self.entries += int(n)
        self.calls += 1

    def reset(self) -> None:
        self.entries = 0
        self.calls = 0


hvp_counter = OperationCounter()


class FullHessian:
    """Dense symmetric PSD matrix representation."""

    __slots__ = ("matrix",)

    def __init__(self, matrix) -> None:
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ShapeError("full Hessian must be a square matrix")
        scale = max(1.0, float(np.abs(matrix).max(initial=0.0)))
        if matrix.size and np.abs(matrix - matrix.T).max() > 1e-12 * scale:
            raise ValidationError("full Hessian must be symmetric within 1e-12")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("FullHessian is immutable")

    @classmethod
    def identity(cls, dim: int, scale: float = 1.0) -> "FullHessian":
        return cls(np.eye(dim) * scale)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __repr__(self) -> str:
        return f"FullHessian(dim={self.dim})"


class DiagonalHessian:
    """Diagonal representation: nonnegative per-coordinate curvatures."""

    __slots__ = ("values",)

    def __init__(self, values) -> None:
        values = np.array(values, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError("diagonal Hessian must be a 1-d vector")
        if values.size and values.min(initial=0.0) < 0:
            raise ValidationError("diagonal Hessian entries must be >= 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("DiagonalHessian is immutable")

    @classmethod
    def scaled_identity(cls, dim: int, scale: float) -> "DiagonalHessian":
        return cls(np.full(dim, float(scale)))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"DiagonalHessian(dim={self.dim})"


class DfpMemory:
    """Last ``m`` optimizer steps and gradient differences, oldest first.

    Every stored pair satisfies the positive-curvature condition
    ``dx . dg > CURVATURE_EPS``; ``rho`` is the reciprocal of that inner
    product.  The represented operator is the rank-2m quasi-Newton
    Hessian built by applying the step/gradient-difference update pair
    by pair on top of a scaled identity.
    """

    __slots__ = ("steps", "grad_diffs", "rhos", "memory_size")

    def __init__(self, steps, grad_diffs, rhos, memory_size: int) -> None:
        steps = np.array(steps, dtype=np.float64)
        grad_diffs = np.array(grad_diffs, dtype=np.float64)
        rhos = np.array(rhos, dtype=np.float64)
        if steps.ndim != 2 or grad_diffs.shape != steps.shape:
            raise ShapeError("steps and grad_diffs must be (k, p) arrays")
        k = steps.shape[0]
        if rhos.shape != (k,):
            raise ShapeError("rhos must have one entry per pair")
        if not 1 <= int(memory_size) <= MAX_DFP_MEMORY:
            raise ValidationError(f"memory_size must be in [1, {MAX_DFP_MEMORY}]")
        if not 1 <= k <= int(memory_size):
            raise EmptyMemoryError(
                f"memory must hold between 1 and {memory_size} pairs, got {k}"
            )
        curv = np.einsum("ij,ij->i", steps, grad_diffs)
        if curv.min() <= CURVATURE_EPS:
            raise ValidationError("all stored pairs must have positive curvature")
        if not np.allclose(rhos, 1.0 / curv, rtol=1e-12, atol=0.0):
            raise ValidationError("rho entries must equal 1/(dx . dg)")
        for arr in (steps, grad_diffs, rhos):
            arr.setflags(write=False)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "grad_diffs", grad_diffs)
        object.__setattr__(self, "rhos", rhos)
        object.__setattr__(self, "memory_size", int(memory_size))

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("DfpMemory is immutable")

    @property
    def dim(self) -> int:
        return self.steps.shape[1]

    def __len__(self) -> int:
        return self.steps.shape[0]

    def __repr__(self) -> str:
        return f"DfpMemory(pairs={len(self)}, dim={self.dim}, m={self.memory_size})"


class AdamMoment:
    """Bias-corrected second-moment diagonal with a dataset-size scale.

    The stored operator is ``scale * diag(v_hat)``: the moment estimate
    approximates per-example curvature, while accumulated precisions are
    kept in summed-loss scale, hence the multiplier.
    """

    __slots__ = ("v_hat", "scale")

    def __init__(self, v_hat, scale: float = 1.0) -> None:
        v_hat = np.array(v_hat, dtype=np.float64)
        if v_hat.ndim != 1:
            raise ShapeError("v_hat must be a 1-d vector")
        if v_hat.size and v_hat.min(initial=0.0) < 0:
            raise ValidationError("second-moment entries must be >= 0")
        if scale < 0:
            raise ValidationError("scale must be >= 0")
        v_hat.setflags(write=False)
        object.__setattr__(self, "v_hat", v_hat)
        object.__setattr__(self, "scale", float(scale))

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("AdamMoment is immutable")

    @property
    def dim(self) -> int:
        return self.v_hat.shape[0]

    def __repr__(self) -> str:
        return f"AdamMoment(dim={self.dim}, scale={self.scale})"


HessianRepr = Union[FullHessian, DiagonalHessian, DfpMemory, AdamMoment]


class PriorDistribution:
    """Gaussian posterior carried between rounds: mean and precision."""

    __slots__ = ("mean", "precision", "_mean_dense")

    def __init__(self, mean: SparseVector, precision: HessianRepr) -> None:
        if mean.dim != precision.dim:
            raise ShapeError(
                f"mean dim {mean.dim} does not match precision dim {precision.dim}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", precision)
        object.__setattr__(self, "_mean_dense", None)

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("PriorDistribution is immutable")

    @property
    def dim(self) -> int:
        return self.mean.dim

    def mean_dense(self) -> np.ndarray:
        cached = self._mean_dense
        if cached is None:
            cached = self.mean.to_dense()
            cached.setflags(write=False)
            object.__setattr__(self, "_mean_dense", cached)
        return cached

    def __repr__(self) -> str:
        return f"PriorDistribution(dim={self.dim}, precision={self.precision!r})"


def cold_start_prior(dim: int, l2_base: float, hessian_mode: str = "diag") -> PriorDistribution:
    """Zero-mean prior with precision l2_base * I.

    This makes cold start the same objective as an incremental round, so
    the training loop has a single code path.  Only the full mode stores
    a dense identity; every other mode is served by the diagonal.
    """
    if l2_base <= 0:
        raise ValidationError("cold start requires a positive l2_base")
    if hessian_mode == "full":
        precision: HessianRepr = FullHessian.identity(dim, l2_base)
    else:
        precision = DiagonalHessian.scaled_identity(dim, l2_base)
    return PriorDistribution(SparseVector.zeros(dim), precision)


def _dense_weights(w, dim: int) -> np.ndarray:
    if isinstance(w, SparseVector):
        if w.dim != dim:
            raise ShapeError(f"weight dim {w.dim} vs expected {dim}")
        return w.to_dense()
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (dim,):
        raise ShapeError(f"weights must have shape ({dim},), got {w.shape}")
    return w


def _bernoulli_weights(w, data: PhaseDataset) -> np.ndarray:
    z = data.feature_matrix @ _dense_weights(w, data.feature_dim) + data.offsets
    p = sigmoid_array(z)
    return p * (1.0 - p)


def logistic_hessian_full(
    w, data: PhaseDataset, dim_budget: int = FULL_DIM_BUDGET
) -> FullHessian:
    """Exact Hessian of the summed logistic loss at ``w``.

    H = sum_i p_i (1 - p_i) x_i x_i^T with p_i the predicted
    probability of example i.  Additive over dataset partitions.
    """
    p = data.feature_dim
    if p > dim_budget:
        raise CapacityError(
            f"full Hessian of dim {p} exceeds budget {dim_budget}; "
            "use the diagonal or step-memory representation"
        )
    if len(data) == 0:
        return FullHessian(np.zeros((p, p)))
    weights = _bernoulli_weights(w, data)
    X = data.feature_matrix
    H = (X.T @ X.multiply(weights[:, None])).toarray()
    return FullHessian((H + H.T) / 2.0)


def logistic_hessian_diag(w, data: PhaseDataset) -> DiagonalHessian:
    """Diagonal of the exact logistic Hessian: sum_i p_i(1-p_i) x_ij^2."""
    if len(data) == 0:
        return DiagonalHessian(np.zeros(data.feature_dim))
    weights = _bernoulli_weights(w, data)
    X2 = data.feature_matrix.copy()
    X2.data = X2.data**2
    return DiagonalHessian(np.asarray(X2.T @ weights).ravel())


def accumulate_precision(
    prior: HessianRepr, data_h: HessianRepr, lambda_f: float
) -> HessianRepr:
    """Chain precisions across rounds: lambda_f * prior + data_h.

    Only the closed-under-addition variants participate; step memories
    and second moments are rebuilt from scratch each round instead.
    """
    if lambda_f < 0:
        raise ValidationError("lambda_f must be >= 0")
    if isinstance(prior, FullHessian) and isinstance(data_h, FullHessian):
        if prior.dim != data_h.dim:
            raise ShapeError("precision dims differ")
        return FullHessian(lambda_f * prior.matrix + data_h.matrix)
    if isinstance(prior, DiagonalHessian) and isinstance(data_h, DiagonalHessian):
        if prior.dim != data_h.dim:
            raise ShapeError("precision dims differ")
        return DiagonalHessian(lambda_f * prior.values + data_h.values)
    raise TypeError(
        "accumulate_precision requires matching Full or Diagonal variants, got "
        f"{type(prior).__name__} + {type(data_h).__name__}"
    )


def scale_precision(repr_: HessianRepr, factor: float) -> HessianRepr:
    """Scalar-scale a precision operator (used to decay skipped entities)."""
    if factor < 0:
        raise ValidationError("scale factor must be >= 0")
    if isinstance(repr_, FullHessian):
        return FullHessian(factor * repr_.matrix)
    if isinstance(repr_, DiagonalHessian):
        return DiagonalHessian(factor * repr_.values)
    if isinstance(repr_, AdamMoment):
        return AdamMoment(repr_.v_hat, factor * repr_.scale)
    if isinstance(repr_, DfpMemory):
        # Scaling grad-diffs by c and rhos by 1/c scales the operator by c
        # exactly (the two-loop output is linear in the grad-diff block).
        if factor == 0:
            raise ValidationError("a step memory cannot be scaled to zero")
        return DfpMemory(
            repr_.steps,
            factor * repr_.grad_diffs,
            repr_.rhos / factor,
            repr_.memory_size,
        )
    raise TypeError(f"unknown Hessian representation {type(repr_).__name__}")


def dfp_record(
    trajectory: Sequence[tuple[np.ndarray, np.ndarray]],
    memory_size: int,
    curvature_eps: float = CURVATURE_EPS,
) -> DfpMemory:
    """Build a step memory from consecutive (point, gradient) snapshots.

    Pairs failing the positive-curvature filter are skipped; of the
    survivors only the newest ``memory_size`` are kept.  Raises
    EmptyMemoryError when nothing survives (callers fall back to the
    cold-start ridge).
    """
    points = [np.asarray(x, dtype=np.float64) for x, _ in trajectory]
    grads = [np.asarray(g, dtype=np.float64) for _, g in trajectory]
    if len(points) < 2:
        raise EmptyMemoryError("need at least 2 trajectory points to form a pair")
    steps, diffs, rhos = [], [], []
    for k in range(1, len(points)):
        dx = points[k] - points[k - 1]
        dg = grads[k] - grads[k - 1]
        curv = float(dx @ dg)
        if curv > curvature_eps:
            steps.append(dx)
            diffs.append(dg)
            rhos.append(1.0 / curv)
    if not steps:
        raise EmptyMemoryError("no trajectory pair passed the curvature filter")
    keep = int(memory_size)
    return DfpMemory(steps[-keep:], diffs[-keep:], rhos[-keep:], keep)


def dfp_hvp(memory: DfpMemory, d) -> np.ndarray:
    """Hessian-vector product from the step memory via two-loop recursion.

    This is the L-BFGS two-loop with the roles of the step and the
    gradient difference exchanged, so it applies the (direct, not
    inverse) quasi-Newton Hessian.  The base operator is the identity
    scaled by the newest pair's curvature ratio dx.dg / dx.dx.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (memory.dim,):
        raise ShapeError(f"vector must have shape ({memory.dim},)")
    k = len(memory)
    r = d.copy()
    alphas = np.empty(k)
    for i in range(k - 1, -1, -1):
        alphas[i] = memory.rhos[i] * (memory.grad_diffs[i] @ r)
        r -= alphas[i] * memory.steps[i]
    newest_dx = memory.steps[-1]
    newest_dg = memory.grad_diffs[-1]
    r *= (newest_dx @ newest_dg) / (newest_dx @ newest_dx)
    for i in range(k):
        beta = memory.rhos[i] * (memory.steps[i] @ r)
        r += (alphas[i] - beta) * memory.grad_diffs[i]
    hvp_counter.add((4 * k + 1) * memory.dim)
    return r


def adam_second_moment_update(v: np.ndarray, g: np.ndarray, beta2: float) -> np.ndarray:
    """One exponential-moving-average step: beta2 * v + (1 - beta2) * g^2."""
    if not 0.0 < beta2 < 1.0:
        raise ValidationError("beta2 must lie in (0, 1)")
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if v.shape != g.shape:
        raise ShapeError("moment and gradient shapes differ")
    return beta2 * v + (1.0 - beta2) * g * g


def adam_bias_corrected(v: np.ndarray, beta2: float, step: int) -> np.ndarray:
    """Bias-corrected moment v / (1 - beta2^step)."""
    if step < 1:
        raise ValidationError("step must be >= 1")
    if not 0.0 < beta2 < 1.0:
        raise ValidationError("beta2 must lie in (0, 1)")
    return np.asarray(v, dtype=np.float64) / (1.0 - beta2**step)


def hvp(repr_: HessianRepr, v) -> np.ndarray:
    """Apply a precision operator to a vector, whatever its representation."""
    if isinstance(repr_, DfpMemory):
        return dfp_hvp(repr_, v)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (repr_.dim,):
        raise ShapeError(f"vector must have shape ({repr_.dim},)")
    if isinstance(repr_, FullHessian):
        hvp_counter.add(repr_.dim * repr_.dim)
        return repr_.matrix @ v
    if isinstance(repr_, DiagonalHessian):
        hvp_counter.add(repr_.dim)
        return repr_.values * v
    if isinstance(repr_, AdamMoment):
        hvp_counter.add(repr_.dim)
        return (repr_.scale * repr_.v_hat) * v
    raise TypeError(f"unknown Hessian representation {type(repr_).__name__}")
