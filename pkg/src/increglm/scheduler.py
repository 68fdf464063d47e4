"""Outer training loop over a stream of phase datasets.

Rounds alternate between periodic cold starts and incremental updates.
A counter tracks rounds since the last cold start: a round is cold
exactly when the counter is zero, and the counter advances modulo the
cold period.  Any training failure rolls the state back to the
pre-round snapshot and (by default) resets the counter, forcing the
next round to be a cold start.

Cold starts read only a bounded sliding window of recent phases, kept
in the state's history buffer.  When a store directory is supplied,
each round reloads the previous round's models from disk before
training and persists its own result after, so the on-disk format is
exercised continuously and load/fit/save timings mirror a production
pipeline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from .dataio import load_round, save_round
from .errors import NumericalError, ValidationError
from .model import GlmixModel, PhaseDataset
from .trainer import TrainerConfig, fit_glmix_cold, incremental_glmix_round

__all__ = [
    "ScheduleConfig",
    "StreamState",
    "RoundReport",
    "step",
    "run_stream",
    "resume_state",
]


@dataclass(frozen=True)
class ScheduleConfig:
    """Stream-loop settings; training knobs live in ``trainer``."""

    cold_period: int = 16
    cold_window: Optional[int] = None
    failure_policy: bool = True
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    @property
    def lambda_f(self) -> float:
        return self.trainer.lambda_f

    @property
    def hessian_mode(self) -> str:
        return self.trainer.hessian_mode

    @property
    def window_length(self) -> int:
        return self.cold_window if self.cold_window is not None else self.cold_period

    def validate(self) -> None:
        if self.cold_period < 1:
            raise ValidationError("cold_period must be >= 1")
        if self.window_length < 1:
            raise ValidationError("cold_window must be >= 1")
        self.trainer.validate()


def _empty_priors() -> dict:
    return {"fixed": None, "random": {}}


@dataclass(frozen=True)
class StreamState:
    """Everything the loop carries between rounds."""

    t: int = 0
    counter: int = 0
    model: Optional[GlmixModel] = None
    priors: dict = field(default_factory=_empty_priors)
    history: tuple[PhaseDataset, ...] = ()

    @classmethod
    def initial(cls) -> "StreamState":
        return cls()


@dataclass(frozen=True)
class RoundReport:
    """One line per round: which branch ran and where the time went."""

    t: int
    branch: str
    n_examples: int
    load_seconds: float
    fit_seconds: float
    save_seconds: float
    failed: bool = False
    message: Optional[str] = None


TrainRound = Callable[[StreamState, PhaseDataset, str, ScheduleConfig], tuple]


def _default_train_round(
    state: StreamState, d_t: PhaseDataset, branch: str, config: ScheduleConfig
) -> tuple[GlmixModel, dict]:
    if branch == "cold":
        window = (state.history + (d_t,))[-config.window_length :]
        return fit_glmix_cold(window, config.trainer)
    return incremental_glmix_round(
        d_t, state.model, state.priors, config.trainer, mode="incremental"
    )


def step(
    state: StreamState,
    d_t: PhaseDataset,
    config: ScheduleConfig,
    *,
    store_dir=None,
    train_round: Optional[TrainRound] = None,
) -> tuple[StreamState, RoundReport]:
    """Run one round on the newest phase.

    The round is cold iff the counter is zero.  On success the counter
    advances modulo the cold period and the phase joins the history
    buffer.  On a training failure the model, priors and buffer are
    exactly the pre-round ones (the state value is never mutated) and
    the counter resets to zero under the default failure policy.
    """
    config.validate()
    if d_t.phase_index != state.t:
        raise ValidationError(
            f"phase index {d_t.phase_index} does not match stream position {state.t}"
        )
    branch = "cold" if state.counter == 0 else "incre"
    train = train_round or _default_train_round

    load_seconds = 0.0
    working = state
    if store_dir is not None and state.t > 0 and state.model is not None:
        began = time.perf_counter()
        model, priors, _ = load_round(store_dir, state.t - 1)
        load_seconds = time.perf_counter() - began
        working = replace(state, model=model, priors=priors)

    try:
        began = time.perf_counter()
        model, priors = train(working, d_t, branch, config)
        fit_seconds = time.perf_counter() - began
    except (NumericalError, ValidationError) as exc:
        counter = 0 if config.failure_policy else (state.counter + 1) % config.cold_period
        failed_state = replace(state, t=state.t + 1, counter=counter)
        report = RoundReport(
            t=state.t,
            branch=branch,
            n_examples=len(d_t),
            load_seconds=load_seconds,
            fit_seconds=0.0,
            save_seconds=0.0,
            failed=True,
            message=str(exc),
        )
        return failed_state, report

    counter = (state.counter + 1) % config.cold_period
    save_seconds = 0.0
    if store_dir is not None:
        began = time.perf_counter()
        save_round(
            store_dir,
            state.t,
            model,
            priors,
            {
                "lambda_f": config.lambda_f,
                "hessian_mode": config.hessian_mode,
                "counter": counter,
            },
        )
        save_seconds = time.perf_counter() - began

    history = (state.history + (d_t,))[-config.window_length :]
    next_state = StreamState(
        t=state.t + 1, counter=counter, model=model, priors=priors, history=history
    )
    report = RoundReport(
        t=state.t,
        branch=branch,
        n_examples=len(d_t),
        load_seconds=load_seconds,
        fit_seconds=fit_seconds,
        save_seconds=save_seconds,
    )
    return next_state, report


def run_stream(
    stream: Sequence[PhaseDataset],
    config: ScheduleConfig,
    sink: Optional[Callable[[RoundReport], None]] = None,
    *,
    store_dir=None,
    state: Optional[StreamState] = None,
    train_round: Optional[TrainRound] = None,
) -> StreamState:
    """Fold :func:`step` over the stream, emitting one report per round.

    Phases must be contiguous starting at the state's position (from 0
    for a fresh state).  Deterministic given the stream and config.
    """
    config.validate()
    state = state or StreamState.initial()
    for offset, d_t in enumerate(stream):
        if d_t.phase_index != state.t:
            raise ValidationError(
                f"stream position {offset} holds phase {d_t.phase_index}, "
                f"expected {state.t}"
            )
        state, report = step(
            state, d_t, config, store_dir=store_dir, train_round=train_round
        )
        if sink is not None:
            sink(report)
    return state


def resume_state(store_dir, recent_phases: Sequence[PhaseDataset], config: ScheduleConfig) -> StreamState:
    """Rebuild a stream state from the newest persisted round.

    The history buffer is not persisted (datasets live in their own
    files); pass the most recent phases so future cold starts see the
    same window they would have seen without the restart.
    """
    model, priors, meta = load_round(store_dir)
    history = tuple(recent_phases)[-config.window_length :]
    return StreamState(
        t=int(meta["t"]) + 1,
        counter=int(meta["counter"]),
        model=model,
        priors=priors,
        history=history,
    )
