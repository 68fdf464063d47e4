"""Deterministic minimizers: batch L-BFGS and mini-batch Adam.

Both return the artifacts downstream consumers need beyond the
minimizer itself: L-BFGS exports the tail of its iterate/gradient
trajectory (feeding the step-memory curvature representation) and Adam
exports its bias-corrected second moment (feeding the moment diagonal).

Determinism is a hard contract: identical inputs and configuration give
bit-identical results, so reruns and persistence round-trips can be
compared exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .loss import ObjectiveEvaluation
from .model import PhaseDataset

__all__ = [
    "AdamConfig",
    "OptimizerConfig",
    "OptimizationResult",
    "lbfgs_minimize",
    "adam_minimize",
]


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 50
    shuffle_seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValidationError("beta1 in [0,1), beta2 in (0,1) required")
        if self.epsilon <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("epsilon, batch_size and epochs must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    """Batch-solver settings.

    ``gradient_tolerance`` is relative to the initial gradient norm (an
    absolute floor of the same value applies when the initial norm is
    below one).  The trajectory retains the final ``trajectory_length``
    iterate/gradient points, enough to build a step memory of
    ``trajectory_length - 1`` pairs.
    """

    max_iterations: int = 100
    gradient_tolerance: float = 1e-6
    lbfgs_memory: int = 10
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    armijo_max_trials: int = 40
    trajectory_length: int = 11
    stall_tolerance: float = 1e-10
    stall_window: int = 3
    adam: AdamConfig = field(default_factory=AdamConfig)

    def validate(self) -> None:
        if self.max_iterations < 0 or self.lbfgs_memory < 1:
            raise ValidationError("max_iterations >= 0 and lbfgs_memory >= 1 required")
        if not 0 < self.gradient_tolerance < 1:
            raise ValidationError("gradient_tolerance must lie in (0, 1)")
        if not 0 < self.armijo_c1 < 1 or not 0 < self.armijo_shrink < 1:
            raise ValidationError("line-search constants must lie in (0, 1)")
        if self.armijo_max_trials < 1 or self.trajectory_length < 1:
            raise ValidationError("armijo_max_trials and trajectory_length must be >= 1")
        self.adam.validate()


@dataclass(frozen=True)
class OptimizationResult:
    w_star: np.ndarray
    trajectory: tuple[tuple[np.ndarray, np.ndarray], ...]
    final_value: float
    iterations: int
    converged: bool
    final_grad_norm: float
    stop_reason: str


Objective = Callable[[np.ndarray], object]


def _evaluate(objective: Objective, w: np.ndarray) -> tuple[float, np.ndarray]:
    out = objective(w)
    if isinstance(out, ObjectiveEvaluation):
        value, grad = out.value, out.gradient
    else:
        value, grad = out
    return float(value), np.asarray(grad, dtype=np.float64)


def _check_finite(value: float, grad: np.ndarray, where: str) -> None:
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite objective evaluation at {where}")


def lbfgs_minimize(
    objective: Objective, w0, config: OptimizerConfig | None = None
) -> OptimizationResult:
    """Minimize a smooth objective with two-loop L-BFGS.

    The line search is Armijo backtracking (sufficient decrease only)
    with one quadratic-interpolation refinement per iteration: after a
    step passes the Armijo test, the minimizer of the quadratic fitted
    through the available values is also tried and kept if strictly
    better.  On quadratic objectives this makes the search exact, which
    in turn makes the iteration terminate finitely.

    Convergence means the gradient norm fell below
    ``tol * max(1, |g0|)``.  Stagnating objectives (relative decrease
    below ``stall_tolerance`` for ``stall_window`` consecutive accepted
    steps) and failed line searches stop the run without the converged
    flag.
    """
    config = config or OptimizerConfig()
    config.validate()
    x = np.array(w0, dtype=np.float64)
    f, g = _evaluate(objective, x)
    _check_finite(f, g, "initial point")
    g0_norm = float(np.linalg.norm(g))
    threshold = config.gradient_tolerance * max(1.0, g0_norm)

    tail = max(2, config.trajectory_length)
    trajectory = [(x.copy(), g.copy())]
    pairs: list[tuple[np.ndarray, np.ndarray, float]] = []
    recent_values = [f]
    stop_reason = "max_iterations"
    iterations = 0

    if float(np.linalg.norm(g)) <= threshold:
        return OptimizationResult(
            x, tuple(trajectory), f, 0, True, float(np.linalg.norm(g)), "gradient"
        )

    for iterations in range(1, config.max_iterations + 1):
        p = _two_loop_direction(g, pairs)
        slope = float(g @ p)
        if slope >= 0.0:
            p = -g
            slope = float(g @ p)
        accepted = _armijo_with_refinement(objective, x, f, p, slope, config)
        if accepted is None:
            stop_reason = "line_search_failure"
            iterations -= 1
            break
        x_new, f_new, g_new = accepted
        _check_finite(f_new, g_new, f"iteration {iterations}")

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            pairs.append((s, y, 1.0 / sy))
            if len(pairs) > config.lbfgs_memory:
                pairs.pop(0)

        x, f, g = x_new, f_new, g_new
        trajectory.append((x.copy(), g.copy()))
        if len(trajectory) > tail:
            trajectory.pop(0)

        grad_norm = float(np.linalg.norm(g))
        if grad_norm <= threshold:
            stop_reason = "gradient"
            break
        recent_values.append(f)
        if len(recent_values) > config.stall_window + 1:
            recent_values.pop(0)
        if len(recent_values) == config.stall_window + 1:
            drop = recent_values[0] - recent_values[-1]
            if drop < config.stall_tolerance * max(1.0, abs(recent_values[-1])):
                stop_reason = "stalled"
                break

    grad_norm = float(np.linalg.norm(g))
    return OptimizationResult(
        x,
        tuple(trajectory),
        f,
        iterations,
        grad_norm <= threshold,
        grad_norm,
        stop_reason,
    )


def _two_loop_direction(
    g: np.ndarray, pairs: Sequence[tuple[np.ndarray, np.ndarray, float]]
) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        gamma = float(s @ y) / float(y @ y)
    else:
        gamma = 1.0
    r = gamma * q
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ r)
        r += (a - b) * s
    return -r


def _armijo_with_refinement(objective, x, f, p, slope, config):
    """Backtracking Armijo search plus one interpolation refinement.

    Returns (x_new, f_new, g_new) or None when no trial step satisfies
    sufficient decrease.  Non-finite trial values simply fail the test
    and trigger further backtracking.
    """
    c1, shrink = config.armijo_c1, config.armijo_shrink
    alpha = 1.0
    found = None
    for _ in range(config.armijo_max_trials):
        x_try = x + alpha * p
        f_try, g_try = _evaluate(objective, x_try)
        if np.isfinite(f_try) and f_try <= f + c1 * alpha * slope:
            found = (alpha, x_try, f_try, g_try)
            break
        alpha *= shrink
    if found is None:
        return None
    alpha, x_acc, f_acc, g_acc = found
    # Quadratic through (0, f, slope) and (alpha, f_acc): one refinement.
    curvature = 2.0 * (f_acc - f - alpha * slope) / (alpha * alpha)
    if curvature > 0.0:
        alpha_q = -slope / curvature
        if alpha_q > 0.0 and abs(alpha_q - alpha) > 1e-14 * alpha:
            x_q = x + alpha_q * p
            f_q, g_q = _evaluate(objective, x_q)
            if (
                np.isfinite(f_q)
                and f_q <= f + c1 * alpha_q * slope
                and f_q < f_acc
            ):
                return x_q, f_q, g_q
    return x_acc, f_acc, g_acc


BatchObjective = Callable[[np.ndarray, Sequence], object]


def adam_minimize(
    objective_batched: BatchObjective,
    w0,
    data: PhaseDataset,
    config: OptimizerConfig | None = None,
) -> tuple[OptimizationResult, np.ndarray]:
    """Standard Adam over shuffled mini-batches of ``data``.

    ``objective_batched(w, batch)`` evaluates the objective restricted
    to a batch, passed as an array of row indices into
    ``data.examples``.  Runs ``epochs`` passes with a seeded shuffle per
    epoch; alongside the result it returns the final bias-corrected
    second moment of the batch gradients, the moment diagonal used as a
    curvature proxy.
    """
    config = config or OptimizerConfig()
    config.validate()
    ac = config.adam
    n = len(data)
    if n == 0:
        raise ValidationError("adam_minimize requires a non-empty dataset")
    if ac.batch_size > n:
        raise ValidationError(f"batch_size {ac.batch_size} exceeds dataset size {n}")

    x = np.array(w0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    rng = np.random.default_rng(ac.shuffle_seed)
    step = 0
    for _ in range(ac.epochs):
        order = rng.permutation(n)
        for start in range(0, n, ac.batch_size):
            batch = order[start : start + ac.batch_size]
            step += 1
            out = objective_batched(x, batch)
            value, grad = (
                (out.value, out.gradient)
                if isinstance(out, ObjectiveEvaluation)
                else out
            )
            grad = np.asarray(grad, dtype=np.float64)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite batch evaluation at step {step}")
            m = ac.beta1 * m + (1.0 - ac.beta1) * grad
            v = ac.beta2 * v + (1.0 - ac.beta2) * grad * grad
            m_hat = m / (1.0 - ac.beta1**step)
            v_hat = v / (1.0 - ac.beta2**step)
            x = x - ac.learning_rate * m_hat / (np.sqrt(v_hat) + ac.epsilon)
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite iterate at step {step}")

    v_hat = v / (1.0 - ac.beta2**step)
    final_value, final_grad = _evaluate(
        lambda w: objective_batched(w, np.arange(n)), x
    )
    grad_norm = float(np.linalg.norm(final_grad))
    result = OptimizationResult(
        w_star=x,
        trajectory=((x.copy(), final_grad),),
        final_value=final_value,
        iterations=step,
        converged=False,
        final_grad_norm=grad_norm,
        stop_reason="epochs_exhausted",
    )
    return result, v_hat
