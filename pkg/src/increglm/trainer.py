"""Training of fixed- and random-effects GLMs across rounds.

Three modes share one engine:

* cold: fit on a window of phases from a zero weight vector, with only
  the zero-mean ridge as prior;
* warm: fit on the newest phase only, initialized at the previous
  weights, again with only the ridge;
* incremental: fit on the newest phase with a quadratic penalty
  anchoring to the previous round's posterior, scaled by the
  forgetting factor.

Cold start is literally the incremental objective with a zero-mean
prior of precision l2_base * I, so every mode runs the same code path.
Each fit emits the next round's posterior (weights plus a curvature
representation chosen by ``hessian_mode``).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import EmptyMemoryError, NumericalError, ShapeError, ValidationError
from .hessian import (
    AdamMoment,
    DiagonalHessian,
    HessianRepr,
    PriorDistribution,
    accumulate_precision,
    cold_start_prior,
    dfp_record,
    logistic_hessian_diag,
    logistic_hessian_full,
    scale_precision,
)
from .loss import ObjectiveEvaluation, incremental_objective, prior_penalty
from .model import (
    GlmixModel,
    GlmModel,
    PhaseDataset,
    SparseVector,
    glm_score_dataset,
    glmix_score_dataset,
    merge_phases,
    sigmoid_array,
)
from .optimizer import OptimizerConfig, OptimizationResult, adam_minimize, lbfgs_minimize

__all__ = [
    "HESSIAN_MODES",
    "TrainerConfig",
    "Cold",
    "Warm",
    "Incremental",
    "TrainMode",
    "TrainedComponent",
    "BcdSchedule",
    "train_glm",
    "train_random_effects",
    "block_coordinate_descent",
    "fit_glmix_cold",
    "incremental_glmix_round",
    "glmix_penalized_nll",
]

HESSIAN_MODES = ("full", "diag", "dfp", "adam")


@dataclass(frozen=True)
class TrainerConfig:
    """Knobs shared by every component fit in a round."""

    l2_base: float = 1.0
    hessian_mode: str = "diag"
    lambda_f: float = 1.0
    lambda_f_max: float = 1.0
    dfp_memory: int = 3
    full_dim_budget: int = 4096
    bcd_sweeps: int = 2
    entity_types: Optional[tuple[str, ...]] = None
    incremental_fixed: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def validate(self) -> None:
        if self.l2_base < 0:
            raise ValidationError("l2_base must be >= 0")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ValidationError(f"hessian_mode must be one of {HESSIAN_MODES}")
        if not 0.0 <= self.lambda_f <= self.lambda_f_max:
            raise ValidationError(
                f"lambda_f must lie in [0, {self.lambda_f_max}], got {self.lambda_f}"
            )
        if not 1 <= self.dfp_memory <= 10:
            raise ValidationError("dfp_memory must lie in [1, 10]")
        if self.bcd_sweeps < 1:
            raise ValidationError("bcd_sweeps must be >= 1")
        self.optimizer.validate()

    def fit_optimizer(self) -> OptimizerConfig:
        """Optimizer settings with the trajectory tail sized for the step memory."""
        length = max(self.optimizer.trajectory_length, self.dfp_memory + 1)
        if self.hessian_mode == "dfp":
            length = self.dfp_memory + 1
        return replace(self.optimizer, trajectory_length=length)


@dataclass(frozen=True)
class Cold:
    """Train from scratch on a window of phases (defaults to the data given)."""

    window: Optional[tuple[PhaseDataset, ...]] = None


@dataclass(frozen=True)
class Warm:
    """Train on the newest data only, starting from the previous weights."""

    prev: GlmModel


@dataclass(frozen=True)
class Incremental:
    """Train on the newest data with the previous posterior as prior."""

    prior: PriorDistribution
    lambda_f: float
    hessian_mode: str = "diag"


TrainMode = Union[Cold, Warm, Incremental]


@dataclass(frozen=True)
class TrainedComponent:
    """One fitted GLM plus the posterior handed to the next round."""

    model: GlmModel
    next_prior: PriorDistribution
    timing: dict
    warning: Optional[str] = None


def _weights_pair(w_dense: np.ndarray, l2_base: float) -> tuple[GlmModel, SparseVector]:
    sparse = SparseVector.from_dense(w_dense)
    return GlmModel(sparse, l2_base), sparse


def _next_precision(
    w_dense: np.ndarray,
    data: PhaseDataset,
    hessian_mode: str,
    config: TrainerConfig,
    prior_precision: Optional[HessianRepr],
    lambda_f: float,
    result: Optional[OptimizationResult],
    v_hat: Optional[np.ndarray],
) -> HessianRepr:
    """Posterior precision after a fit, per the chaining rule of the mode.

    Full and diagonal precisions accumulate: lambda_f * prior + H(D; w).
    The step memory is rebuilt from the final optimizer trajectory (its
    gradients already carry the prior term, so prior curvature
    propagates implicitly).  The moment diagonal is rebuilt from the
    stochastic run and scaled by the dataset size.
    """
    dim = data.feature_dim
    if hessian_mode == "full":
        data_h: HessianRepr = logistic_hessian_full(w_dense, data, config.full_dim_budget)
        base = prior_precision
        if base is None:
            base = cold_start_prior(dim, config.l2_base, "full").precision
        return accumulate_precision(base, data_h, lambda_f)
    if hessian_mode == "diag":
        data_h = logistic_hessian_diag(w_dense, data)
        base = prior_precision
        if base is None:
            base = DiagonalHessian.scaled_identity(dim, config.l2_base)
        return accumulate_precision(base, data_h, lambda_f)
    if hessian_mode == "dfp":
        try:
            return dfp_record(result.trajectory, config.dfp_memory)
        except EmptyMemoryError:
            # Degenerate trajectory (e.g. started at the optimum): fall
            # back to the cold-start ridge.
            return DiagonalHessian.scaled_identity(dim, config.l2_base)
    if hessian_mode == "adam":
        return AdamMoment(v_hat, scale=float(len(data)))
    raise ValidationError(f"unknown hessian_mode {hessian_mode!r}")


def _adam_batch_objective(
    data: PhaseDataset, prior: PriorDistribution, lambda_f: float
) -> Callable[[np.ndarray, np.ndarray], ObjectiveEvaluation]:
    """Mean-scale batch objective for stochastic fitting.

    Batch gradients estimate the per-example average, so the second
    moment approximates average curvature; the trainer rescales it to
    summed-loss scale afterwards.
    """
    X = data.feature_matrix
    y = data.labels
    offs = data.offsets
    n = len(data)

    def batched(w: np.ndarray, rows: np.ndarray) -> ObjectiveEvaluation:
        rows = np.asarray(rows, dtype=np.int64)
        Xb = X[rows]
        z = Xb @ w + offs[rows]
        yb = y[rows]
        value = float(
            np.sum(yb * np.logaddexp(0.0, -z) + (1.0 - yb) * np.logaddexp(0.0, z))
        )
        grad = np.asarray(Xb.T @ (sigmoid_array(z) - yb)).ravel()
        nll = ObjectiveEvaluation(value / rows.size, grad / rows.size)
        pen = prior_penalty(w, prior, lambda_f)
        return nll + ObjectiveEvaluation(pen.value / n, pen.gradient / n)

    return batched


def _adam_config_for(data: PhaseDataset, config: TrainerConfig) -> OptimizerConfig:
    ac = config.optimizer.adam
    if ac.batch_size > len(data):
        ac = replace(ac, batch_size=len(data))
    return replace(config.optimizer, adam=ac)


def _fit(
    data: PhaseDataset,
    prior: PriorDistribution,
    lambda_f: float,
    w0: np.ndarray,
    hessian_mode: str,
    config: TrainerConfig,
) -> tuple[OptimizationResult, Optional[np.ndarray]]:
    """Minimize the prior-regularized likelihood; Adam for the moment mode."""
    if hessian_mode == "adam":
        opt = _adam_config_for(data, config)
        result, v_hat = adam_minimize(
            _adam_batch_objective(data, prior, lambda_f), w0, data, opt
        )
        return result, v_hat
    objective = lambda w: incremental_objective(w, data, prior, lambda_f)
    return lbfgs_minimize(objective, w0, config.fit_optimizer()), None


def _moment_pass(
    data: PhaseDataset, w: np.ndarray, prior: PriorDistribution, lambda_f: float,
    config: TrainerConfig,
) -> np.ndarray:
    """Second moment of batch gradients at fixed weights (zero-rate Adam run)."""
    opt = _adam_config_for(data, config)
    opt = replace(opt, adam=replace(opt.adam, learning_rate=0.0))
    _, v_hat = adam_minimize(
        _adam_batch_objective(data, prior, lambda_f), w, data, opt
    )
    return v_hat


def train_glm(
    data: PhaseDataset, mode: TrainMode, config: Optional[TrainerConfig] = None
) -> TrainedComponent:
    """Fit one GLM under the given mode and emit the next posterior.

    Cold fits the window (``mode.window`` or the data itself) from
    zero; warm fits the data from the previous weights; incremental
    fits the data from the prior mean under the forgetting-weighted
    anchor.  An empty incremental dataset is not an error: the prior
    mean is returned unchanged with its precision decayed by lambda_f,
    flagged by a warning.
    """
    config = config or TrainerConfig()
    config.validate()
    started = time.perf_counter()

    if isinstance(mode, Cold):
        window = mode.window if mode.window is not None else (data,)
        merged = merge_phases(window)
        if len(merged) == 0:
            raise ValidationError("cold start requires a non-empty window")
        # The ridge penalty is always applied through the diagonal
        # representation (identical math for l2 * I), so cold-start
        # weights are bit-identical whatever curvature mode is emitted.
        prior = cold_start_prior(merged.feature_dim, config.l2_base, "diag")
        w0 = np.zeros(merged.feature_dim)
        result = lbfgs_minimize(
            lambda w: incremental_objective(w, merged, prior, 1.0),
            w0,
            config.fit_optimizer(),
        )
        v_hat = (
            _moment_pass(merged, result.w_star, prior, 1.0, config)
            if config.hessian_mode == "adam"
            else None
        )
        precision = _next_precision(
            result.w_star, merged, config.hessian_mode, config,
            None, 1.0, result, v_hat,
        )
        model, sparse_w = _weights_pair(result.w_star, config.l2_base)
        return TrainedComponent(
            model,
            PriorDistribution(sparse_w, precision),
            {"load": 0.0, "fit": time.perf_counter() - started, "save": 0.0},
        )

    if isinstance(mode, Warm):
        if mode.prev.dim != data.feature_dim:
            raise ShapeError(
                f"previous weights dim {mode.prev.dim} vs data dim {data.feature_dim}"
            )
        prior = cold_start_prior(data.feature_dim, config.l2_base, "diag")
        result = lbfgs_minimize(
            lambda w: incremental_objective(w, data, prior, 1.0),
            mode.prev.weights.to_dense(),
            config.fit_optimizer(),
        )
        model, sparse_w = _weights_pair(result.w_star, config.l2_base)
        # Warm start never computes curvature (that is its cost profile);
        # the emitted posterior is the cold-start-shaped ridge.
        next_prior = PriorDistribution(
            sparse_w, DiagonalHessian.scaled_identity(data.feature_dim, config.l2_base)
        )
        return TrainedComponent(
            model,
            next_prior,
            {"load": 0.0, "fit": time.perf_counter() - started, "save": 0.0},
        )

    if isinstance(mode, Incremental):
        if not 0.0 <= mode.lambda_f <= config.lambda_f_max:
            raise ValidationError(
                f"lambda_f must lie in [0, {config.lambda_f_max}], got {mode.lambda_f}"
            )
        if mode.hessian_mode not in HESSIAN_MODES:
            raise ValidationError(f"hessian_mode must be one of {HESSIAN_MODES}")
        prior = mode.prior
        if prior.dim != data.feature_dim:
            raise ShapeError(f"prior dim {prior.dim} vs data dim {data.feature_dim}")
        if len(data) == 0:
            model = GlmModel(prior.mean, config.l2_base)
            decayed = (
                scale_precision(prior.precision, mode.lambda_f)
                if mode.lambda_f > 0
                else DiagonalHessian.scaled_identity(prior.dim, 0.0)
            )
            return TrainedComponent(
                model,
                PriorDistribution(prior.mean, decayed),
                {"load": 0.0, "fit": time.perf_counter() - started, "save": 0.0},
                warning="empty dataset: prior carried forward with decayed precision",
            )
        result, v_hat = _fit(
            data, prior, mode.lambda_f, prior.mean_dense(), mode.hessian_mode, config
        )
        precision = _next_precision(
            result.w_star, data, mode.hessian_mode, config,
            prior.precision, mode.lambda_f, result, v_hat,
        )
        model, sparse_w = _weights_pair(result.w_star, config.l2_base)
        return TrainedComponent(
            model,
            PriorDistribution(sparse_w, precision),
            {"load": 0.0, "fit": time.perf_counter() - started, "save": 0.0},
        )

    raise ValidationError(f"unknown train mode {mode!r}")


def _partition_by_entity(
    data: PhaseDataset, entity_type: str
) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for row, ex in enumerate(data.examples):
        eid = ex.entity_ids.get(entity_type)
        if eid is None:
            raise ValidationError(
                f"example {row} carries no '{entity_type}' entity id"
            )
        groups.setdefault(eid, []).append(row)
    return groups


def train_random_effects(
    data: PhaseDataset,
    entity_type: str,
    offsets,
    priors: Mapping[str, PriorDistribution],
    mode: str,
    config: Optional[TrainerConfig] = None,
) -> dict[str, TrainedComponent]:
    """Train one GLM per entity of ``entity_type`` on its partition.

    ``offsets`` hold the combined logit contribution of every other
    component, one entry per example; they replace the examples'
    offsets for this fit.  ``mode`` is ``"cold"``, ``"warm"`` or
    ``"incremental"``; warm reads only the prior means (as initial
    weights), incremental uses the full priors and cold ignores them.

    Entities with a prior but no examples this phase are carried
    forward unchanged (incremental decays their precision by the
    forgetting factor); entities without a prior are cold-started from
    the zero-mean ridge.  Per-entity failures are isolated: the entity
    keeps its previous state and the warning records the cause.
    """
    config = config or TrainerConfig()
    config.validate()
    if mode not in ("cold", "warm", "incremental"):
        raise ValidationError(f"mode must be cold, warm or incremental, got {mode!r}")
    offsets = np.asarray(offsets, dtype=np.float64)
    shifted = data.with_offsets(offsets)
    groups = _partition_by_entity(shifted, entity_type)
    dim = data.feature_dim

    out: dict[str, TrainedComponent] = {}
    ids = sorted(groups) if mode == "cold" else sorted(set(groups) | set(priors))
    for eid in ids:
        rows = groups.get(eid)
        prior = priors.get(eid)
        if rows is None:
            # No examples this phase: carry the entity forward.
            if mode == "incremental":
                out[eid] = train_glm(
                    PhaseDataset(shifted.phase_index, (), dim),
                    Incremental(prior, config.lambda_f, config.hessian_mode),
                    config,
                )
            else:
                out[eid] = TrainedComponent(
                    GlmModel(prior.mean, config.l2_base),
                    prior,
                    {"load": 0.0, "fit": 0.0, "save": 0.0},
                    warning="no examples this phase",
                )
            continue
        sub = shifted.subset(rows)
        if mode == "cold":
            entity_mode: TrainMode = Cold((sub,))
        elif mode == "warm":
            prev_weights = prior.mean if prior is not None else SparseVector.zeros(dim)
            entity_mode = Warm(GlmModel(prev_weights, config.l2_base))
        else:
            entity_prior = prior if prior is not None else cold_start_prior(
                dim, config.l2_base, config.hessian_mode
            )
            entity_mode = Incremental(entity_prior, config.lambda_f, config.hessian_mode)
        try:
            out[eid] = train_glm(sub, entity_mode, config)
        except (NumericalError, ValidationError) as exc:
            fallback_mean = prior.mean if prior is not None else SparseVector.zeros(dim)
            fallback_prior = prior if prior is not None else cold_start_prior(
                dim, config.l2_base, config.hessian_mode
            )
            out[eid] = TrainedComponent(
                GlmModel(fallback_mean, config.l2_base),
                fallback_prior,
                {"load": 0.0, "fit": 0.0, "save": 0.0},
                warning=f"training failed, entity carried forward: {exc}",
            )
    return out


@dataclass(frozen=True)
class BcdSchedule:
    """Component order and sweep count for block coordinate descent."""

    components: tuple[str, ...]
    sweeps: int = 2


def _discover_entity_types(data: PhaseDataset, config: TrainerConfig) -> tuple[str, ...]:
    if config.entity_types is not None:
        return tuple(config.entity_types)
    types: set[str] = set()
    for ex in data.examples:
        types.update(ex.entity_ids)
    return tuple(sorted(types))


def _type_scores(model: GlmixModel, data: PhaseDataset, entity_type: str) -> np.ndarray:
    scores = np.zeros(len(data))
    per_entity = model.random_effects.get(entity_type, {})
    if not per_entity:
        return scores
    X = data.feature_matrix
    groups: dict[str, list[int]] = {}
    for row, ex in enumerate(data.examples):
        eid = ex.entity_ids.get(entity_type)
        if eid is not None and eid in per_entity:
            groups.setdefault(eid, []).append(row)
    for eid, rows in groups.items():
        scores[rows] = X[rows] @ per_entity[eid].weights.to_dense()
    return scores


def glmix_penalized_nll(data: PhaseDataset, model: GlmixModel, l2_base: float) -> float:
    """Joint objective BCD minimizes: summed NLL plus all ridge terms."""
    scores = glmix_score_dataset(model, data) + data.offsets
    y = data.labels
    nll = float(
        np.sum(y * np.logaddexp(0.0, -scores) + (1.0 - y) * np.logaddexp(0.0, scores))
    )
    ridge = l2_base / 2.0 * float(np.sum(model.fixed.weights.values**2))
    for per_entity in model.random_effects.values():
        for sub in per_entity.values():
            ridge += l2_base / 2.0 * float(np.sum(sub.weights.values**2))
    return nll + ridge


def _bcd_fit(
    data: PhaseDataset,
    model: GlmixModel,
    schedule: BcdSchedule,
    config: TrainerConfig,
) -> tuple[GlmixModel, dict]:
    """Alternate component refits on residual offsets; returns artifacts too."""
    base_offsets = data.offsets
    artifacts: dict = {"fixed": None, "random": {}}
    for _ in range(schedule.sweeps):
        for component in schedule.components:
            fixed_scores = glm_score_dataset(model.fixed, data)
            others = base_offsets + fixed_scores
            for etype in model.entity_types():
                others = others + _type_scores(model, data, etype)
            if component == "fixed":
                residual = others - fixed_scores
                sub = data.with_offsets(residual)
                tc = train_glm(sub, Cold((sub,)), config)
                model = model.with_fixed(tc.model)
                artifacts["fixed"] = tc
            else:
                residual = others - _type_scores(model, data, component)
                comps = train_random_effects(data, component, residual, {}, "cold", config)
                model = model.with_random_effects(
                    component, {eid: c.model for eid, c in comps.items()}
                )
                artifacts["random"][component] = comps
    return model, artifacts


def block_coordinate_descent(
    data: PhaseDataset,
    model: GlmixModel,
    schedule: Optional[BcdSchedule] = None,
    config: Optional[TrainerConfig] = None,
) -> GlmixModel:
    """Refit every component in turn on the residuals of the others.

    Each block update minimizes the joint penalized likelihood in that
    block, so the joint objective is non-increasing across sweeps up to
    optimizer tolerance.
    """
    config = config or TrainerConfig()
    config.validate()
    if schedule is None:
        etypes = _discover_entity_types(data, config)
        schedule = BcdSchedule(("fixed",) + etypes, config.bcd_sweeps)
    fitted, _ = _bcd_fit(data, model, schedule, config)
    return fitted


def fit_glmix_cold(
    window: Sequence[PhaseDataset], config: Optional[TrainerConfig] = None
) -> tuple[GlmixModel, dict]:
    """Cold-start a mixed model on a window and build every posterior.

    Returns the fitted model and a priors mapping of the shape the
    scheduler carries: ``{"fixed": prior, "random": {etype: {id: prior}}}``.
    """
    config = config or TrainerConfig()
    config.validate()
    merged = merge_phases(window)
    if len(merged) == 0:
        raise ValidationError("cold start requires a non-empty window")
    etypes = _discover_entity_types(merged, config)
    model = GlmixModel(
        GlmModel.zeros(merged.feature_dim, config.l2_base),
        {etype: {} for etype in etypes},
    )
    schedule = BcdSchedule(("fixed",) + etypes, config.bcd_sweeps)
    fitted, artifacts = _bcd_fit(merged, model, schedule, config)
    priors = {
        "fixed": artifacts["fixed"].next_prior if artifacts["fixed"] else None,
        "random": {
            etype: {eid: tc.next_prior for eid, tc in comps.items()}
            for etype, comps in artifacts["random"].items()
        },
    }
    return fitted, priors


def incremental_glmix_round(
    data: PhaseDataset,
    model: GlmixModel,
    priors: dict,
    config: Optional[TrainerConfig] = None,
    mode: str = "incremental",
) -> tuple[GlmixModel, dict]:
    """One warm or incremental round over the random effects.

    The fixed model's scores are frozen as offsets for the whole round
    (set ``incremental_fixed`` to refresh the fixed model too, after
    the random effects).  Returns the updated model and priors.
    """
    config = config or TrainerConfig()
    config.validate()
    if mode not in ("warm", "incremental"):
        raise ValidationError("round mode must be warm or incremental")
    etypes = model.entity_types()
    fixed_scores = glm_score_dataset(model.fixed, data)
    pre_round_type_scores = {
        etype: _type_scores(model, data, etype) for etype in etypes
    }
    new_model = model
    new_random: dict[str, dict[str, PriorDistribution]] = {}
    for etype in etypes:
        offsets = data.offsets + fixed_scores
        for other, scores in pre_round_type_scores.items():
            if other != etype:
                offsets = offsets + scores
        comps = train_random_effects(
            data, etype, offsets, priors["random"].get(etype, {}), mode, config
        )
        new_model = new_model.with_random_effects(
            etype, {eid: c.model for eid, c in comps.items()}
        )
        new_random[etype] = {eid: c.next_prior for eid, c in comps.items()}

    new_fixed_prior = priors.get("fixed")
    if config.incremental_fixed and mode == "incremental":
        if new_fixed_prior is None:
            raise ValidationError("incremental fixed update requires a fixed prior")
        offsets = data.offsets
        for etype in etypes:
            offsets = offsets + _type_scores(new_model, data, etype)
        tc = train_glm(
            data.with_offsets(offsets),
            Incremental(new_fixed_prior, config.lambda_f, config.hessian_mode),
            config,
        )
        new_model = new_model.with_fixed(tc.model)
        new_fixed_prior = tc.next_prior

    return new_model, {"fixed": new_fixed_prior, "random": new_random}
