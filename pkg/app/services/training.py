"""
app/services/training.py

Mini-batch AdamW loop shared by pretraining and every fine-tuning method.

Batches: a fresh ``default_rng(seed)`` permutation per epoch, consecutive
full batches of ``min(batch_size, n)`` rows; an epoch's remainder is dropped
so the loss graph always sees one batch size.

Learning rate for update k (0-based) is ``lr_at_step(schedule, k + 1)``.
Checkpoints are taken at step 0, every ``checkpoint_interval`` steps, and at
the final step.
"""

from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from statistics import fmean

import numpy as np
import numpy.typing as npt

from app.core.logging import get_logger
from app.schemas.methods import TrainingFields
from app.schemas.optim import ScheduleSpec
from app.services import autodiff as ad
from app.services.models import INPUT
from app.services.optim import OptState, adamw_step, clip_global_norm, lr_at_step
from app.services.params import ParamMap
from app.services.tensor import NonFiniteError, Tensor

logger = get_logger(__name__)

LABELS = "y"


class EmptyDatasetError(ValueError):
    """Raised when training or evaluation receives zero examples."""

    pass


class TrainingAborted(RuntimeError):
    """A step produced a non-finite loss, gradient or parameter."""

    def __init__(self, step: int, loss: float, reason: str) -> None:
        self.step = step
        self.loss = loss
        self.reason = reason
        super().__init__(f"training aborted at step {step} (loss={loss}): {reason}")


@dataclass(frozen=True)
class Objective:
    """Scalar loss graph over one batch.

    ``constants`` are bound on every step and never trained (frozen base
    weights, penalty anchors). ``batch_constants`` derives extra per-batch
    bindings from the input rows (the KD teacher's outputs).
    """

    loss: ad.Expr
    constants: Mapping[str, Tensor] = field(default_factory=dict)
    batch_constants: Callable[[Tensor], Mapping[str, Tensor]] | None = None


@dataclass(frozen=True)
class TrainingResult:
    checkpoints: list[tuple[int, ParamMap]]
    final: ParamMap
    losses: list[float]

    @property
    def steps_run(self) -> int:
        return len(self.losses)


def cross_entropy_loss(logits: ad.Expr) -> ad.Expr:
    return ad.cross_entropy(logits, ad.input_(LABELS))


def effective_batch_size(batch_size: int, n: int) -> int:
    if n == 0:
        raise EmptyDatasetError("training set is empty")
    return min(batch_size, n)


def iter_batches(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches; deterministic under ``seed``."""
    b = effective_batch_size(batch_size, n)
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - b + 1, b):
            yield order[start : start + b]


def checkpoint_steps(total: int, interval: int) -> list[int]:
    steps = set(range(0, total + 1, max(1, interval)))
    steps.add(total)
    return sorted(steps)


def plateau_reached(losses: Sequence[float], window: int, tol: float) -> bool:
    """True when the latest full window's mean loss improved on the previous one by < ``tol`` (relative)."""
    if len(losses) < 2 * window or len(losses) % window:
        return False
    previous = fmean(losses[-2 * window : -window])
    current = fmean(losses[-window:])
    return previous - current < tol * abs(previous)


def train(
    objective: Objective,
    init: ParamMap,
    X: npt.NDArray[np.float64],
    y: npt.NDArray[np.float64],
    config: TrainingFields,
    *,
    checkpoint_interval: int,
    run_id: str = "train",
    view: Callable[[ParamMap], ParamMap] | None = None,
    should_stop: Callable[[Sequence[float]], bool] | None = None,
) -> TrainingResult:
    """Minimize ``objective`` over the parameters in ``init``.

    ``view`` maps trainable parameters to the checkpoint representation (the
    merged weights of a LoRA run). ``should_stop`` may end the run early; the
    last completed step is then checkpointed.

    Raises:
        EmptyDatasetError: ``X`` has no rows.
        TrainingAborted: A non-finite value appeared during a step.
    """
    n = X.shape[0]
    batch_size = effective_batch_size(config.batch_size, n)
    to_view = view or (lambda p: p)
    wanted = checkpoint_steps(config.steps, checkpoint_interval)
    log = logger.bind(run_id=run_id)

    params = init
    checkpoints: list[tuple[int, ParamMap]] = [(0, to_view(params))]
    losses: list[float] = []
    if config.steps == 0:
        log.info("training_skipped", reason="zero steps")
        return TrainingResult(checkpoints=checkpoints, final=params, losses=losses)

    schedule = ScheduleSpec.for_run(config.peak_lr, config.warmup_steps, config.steps)
    state = OptState.fresh(params, config.optimizer)
    trainable = list(params)
    batches = iter_batches(n, batch_size, config.seed)
    log.info(
        "training_started",
        steps=config.steps,
        batch_size=batch_size,
        trainable=len(trainable),
        num_values=params.num_values(),
    )

    for k in range(config.steps):
        step = k + 1
        idx = next(batches)
        xb = X[idx]
        bindings: dict[str, npt.ArrayLike] = {**objective.constants, **params, INPUT: xb, LABELS: y[idx]}
        if objective.batch_constants is not None:
            bindings.update(objective.batch_constants(xb))
        try:
            loss, grads = ad.value_and_gradient(objective.loss, bindings, wrt=trainable)
            grads = clip_global_norm(grads, config.max_grad_norm)
            params, state = adamw_step(params, grads, state, lr_at_step(schedule, step))
        except NonFiniteError as exc:
            last = losses[-1] if losses else float("nan")
            log.error("training_aborted", step=step, last_loss=last, error=str(exc))
            raise TrainingAborted(step, last, str(exc)) from exc
        losses.append(loss)

        stop = should_stop is not None and should_stop(losses)
        if step in wanted or stop:
            checkpoints.append((step, to_view(params)))
            log.debug("training_checkpoint", step=step, loss=loss)
        if stop:
            log.info("training_plateau", step=step, loss=loss)
            break

    log.info("training_finished", steps_run=len(losses), final_loss=losses[-1])
    return TrainingResult(checkpoints=checkpoints, final=params, losses=losses)
