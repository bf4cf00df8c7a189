"""
app/services/finetune.py

Fine-tuning runs that turn θ0 and a source dataset into a checkpoint trajectory.

    pretrained  trajectory = [(0, θ0)]
    vanilla     cross-entropy
    l1 / l2     cross-entropy + anchor penalty against θ0
    kd          cross-entropy + output matching against θ0 on the same batch
    lora        adapters on W_q / W_v (+ head unless frozen); checkpoints are merged views
    wiseft      vanilla run, then one interpolated model per α

θ0 is only ever read. Every checkpoint is a ParamMap of read-only arrays.
"""

from dataclasses import dataclass, field

from app.core.config import get_settings
from app.core.logging import get_logger
from app.schemas.methods import (
    KDMethod,
    L1Method,
    L2Method,
    LoraMethod,
    MethodConfig,
    PretrainedMethod,
    VanillaMethod,
    WiseFTMethod,
    alpha_label,
)
from app.schemas.model import ModelSpec
from app.services import autodiff as ad
from app.services.bench import DomainDataset
from app.services.models import (
    LORA_TARGETS,
    adapters_from_params,
    adapters_to_params,
    apply_lora,
    check_params,
    forward,
    init_lora_adapters,
    model_graph,
)
from app.services.params import ParamMap, delta_stats, is_head
from app.services.penalties import (
    KD_TARGET,
    anchor_bindings,
    kd_penalty_expr,
    l1_penalty_expr,
    l2_penalty_expr,
    penalized_names,
)
from app.services.tensor import Tensor
from app.services.training import (
    EmptyDatasetError,
    Objective,
    TrainingResult,
    cross_entropy_loss,
    effective_batch_size,
    train,
)

logger = get_logger(__name__)


class TrajectoryError(ValueError):
    pass


class InterpolationError(ValueError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    step: int
    params: ParamMap


@dataclass(frozen=True)
class Interpolation:
    alpha: float
    params: ParamMap

    @property
    def label(self) -> str:
        return alpha_label(self.alpha)


@dataclass(frozen=True)
class Trajectory:
    """Checkpoints with strictly increasing steps, starting at step 0 (= θ0).

    ``interpolations`` is filled only by WiSE-FT runs.
    """

    checkpoints: tuple[Checkpoint, ...]
    interpolations: tuple[Interpolation, ...] = field(default_factory=tuple)
    losses: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.checkpoints:
            raise TrajectoryError("a trajectory needs at least the step-0 checkpoint")
        steps = [c.step for c in self.checkpoints]
        if steps[0] != 0:
            raise TrajectoryError(f"trajectory must start at step 0, got {steps[0]}")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise TrajectoryError(f"checkpoint steps must strictly increase, got {steps}")

    @property
    def initial(self) -> ParamMap:
        return self.checkpoints[0].params

    @property
    def final(self) -> ParamMap:
        return self.checkpoints[-1].params

    @property
    def steps(self) -> list[int]:
        return [c.step for c in self.checkpoints]

    @classmethod
    def from_training(cls, result: TrainingResult, **extra) -> "Trajectory":
        return cls(
            checkpoints=tuple(Checkpoint(step, params) for step, params in result.checkpoints),
            losses=tuple(result.losses),
            **extra,
        )


# ── WiSE-FT ───────────────────────────────────────────────────────────────────


def wise_ft_interpolate(theta0: ParamMap, theta: ParamMap, alpha: float) -> ParamMap:
    """(1 − α)·θ0 + α·θ on every tensor, head included.

    α = 0 and α = 1 return the corresponding input unchanged (bit-exact).
    """
    if not 0.0 <= alpha <= 1.0:
        raise InterpolationError(f"alpha must lie in [0, 1], got {alpha}")
    theta0.require_compatible(theta, context="wise_ft_interpolate")
    if alpha == 0.0:
        return theta0
    if alpha == 1.0:
        return theta
    return theta0.zip_map(theta, lambda a, b: (1.0 - alpha) * a + alpha * b)


# ── Objectives ────────────────────────────────────────────────────────────────


def _anchor_objective(spec: ModelSpec, theta0: ParamMap, method: L1Method | L2Method) -> Objective:
    names = penalized_names(theta0, exempt_head=method.exempt_head)
    builder = l1_penalty_expr if isinstance(method, L1Method) else l2_penalty_expr
    penalty = builder(names, method.lam)
    loss = cross_entropy_loss(model_graph(spec).logits)
    if penalty is not None:
        loss = ad.add(loss, penalty)
    return Objective(loss=loss, constants=anchor_bindings(theta0, names))


def _kd_objective(spec: ModelSpec, theta0: ParamMap, method: KDMethod, batch_size: int) -> Objective:
    graph = model_graph(spec)
    output = graph.logits if method.match == "logits" else graph.features
    loss = ad.add(cross_entropy_loss(graph.logits), kd_penalty_expr(output, method.lam, batch_size))

    def teacher(xb: Tensor) -> dict[str, Tensor]:
        out = forward(spec, theta0, xb)
        return {KD_TARGET: out.logits if method.match == "logits" else out.features}

    return Objective(loss=loss, batch_constants=teacher)


# ── Runs ──────────────────────────────────────────────────────────────────────


def _interval(method: MethodConfig) -> int:
    return method.interval(get_settings().checkpoints_per_run)


def _full_run(
    spec: ModelSpec,
    theta0: ParamMap,
    source: DomainDataset,
    method: VanillaMethod | L1Method | L2Method | KDMethod,
    run_id: str,
) -> Trajectory:
    if isinstance(method, (L1Method, L2Method)):
        objective = _anchor_objective(spec, theta0, method)
    elif isinstance(method, KDMethod):
        objective = _kd_objective(spec, theta0, method, effective_batch_size(method.batch_size, len(source)))
    else:
        objective = Objective(loss=cross_entropy_loss(model_graph(spec).logits))
    result = train(
        objective,
        theta0,
        source.X,
        source.y,
        method,
        checkpoint_interval=_interval(method),
        run_id=run_id,
    )
    return Trajectory.from_training(result)


def _lora_run(
    spec: ModelSpec,
    theta0: ParamMap,
    source: DomainDataset,
    method: LoraMethod,
    run_id: str,
) -> Trajectory:
    targets = tuple(sorted(LORA_TARGETS))
    adapters = init_lora_adapters(spec, theta0, method.rank, method.seed, targets)
    trainable = dict(adapters_to_params(adapters))
    if not method.freeze_head:
        trainable.update(theta0.select(is_head))
    init = ParamMap(trainable)
    frozen_base = {n: t for n, t in theta0.items() if n not in init}

    def merged(params: ParamMap) -> ParamMap:
        base = theta0 if method.freeze_head else theta0.updated(params.select(is_head))
        return apply_lora(base, adapters_from_params(params, targets), method.scale)

    logits = model_graph(spec, targets, float(method.scale)).logits
    objective = Objective(loss=cross_entropy_loss(logits), constants=frozen_base)
    result = train(
        objective,
        init,
        source.X,
        source.y,
        method,
        checkpoint_interval=_interval(method),
        run_id=run_id,
        view=merged,
    )
    return Trajectory.from_training(result)


def finetune(
    spec: ModelSpec,
    theta0: ParamMap,
    source: DomainDataset,
    config: MethodConfig,
    *,
    run_id: str | None = None,
) -> Trajectory:
    """Fine-tune θ0 on ``source`` with ``config`` and return the checkpoint trajectory.

    Raises:
        IncompatibleParamsError: θ0 does not match ``spec``.
        EmptyDatasetError: ``source`` has no examples.
        LoraConfigError: LoRA requested on a model without attention projections.
        TrainingAborted: A non-finite loss or gradient appeared.
    """
    check_params(spec, theta0)
    if len(source) == 0:
        raise EmptyDatasetError("source dataset is empty")
    run_id = run_id or config.kind
    logger.info("finetune_started", run_id=run_id, method=config.kind, hyper=config.hyper)

    if isinstance(config, PretrainedMethod):
        trajectory = Trajectory(checkpoints=(Checkpoint(0, theta0),))
    elif isinstance(config, LoraMethod):
        trajectory = _lora_run(spec, theta0, source, config, run_id)
    elif isinstance(config, WiseFTMethod):
        base = _full_run(spec, theta0, source, config.base_method(), run_id)
        trajectory = Trajectory(
            checkpoints=base.checkpoints,
            losses=base.losses,
            interpolations=tuple(
                Interpolation(alpha, wise_ft_interpolate(theta0, base.final, alpha)) for alpha in config.alphas
            ),
        )
    else:
        trajectory = _full_run(spec, theta0, source, config, run_id)

    logger.info(
        "finetune_finished",
        run_id=run_id,
        checkpoints=len(trajectory.checkpoints),
        **delta_stats(trajectory.final, theta0),
    )
    return trajectory
