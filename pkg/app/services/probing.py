"""
app/services/probing.py

Linear probing of frozen features along a fine-tuning trajectory.

For checkpoint [Φᵢ, vᵢ] and a target domain, the probe v̄ᵢ minimizes

    J(W, b) = mean cross-entropy(Φᵢ(x)·Wᵀ + b, y) + λ_probe·‖W‖²

on the probe-train half of the target data. J is strictly convex in W, so
its minimum can never exceed J at the carried head vᵢ; both values are
reported as ``probe_loss`` / ``carried_loss``. Accuracies are measured on
the probe-eval half.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from hashlib import blake2b

import numpy as np
import numpy.typing as npt
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from app.core.logging import get_logger
from app.schemas.model import ModelSpec
from app.schemas.probing import ProbeConfig, ProbeResult
from app.services.bench import DomainDataset
from app.services.finetune import Trajectory
from app.services.models import forward
from app.services.params import ParamMap
from app.services.tensor import frozen

logger = get_logger(__name__)

DOMINANCE_SLACK = 1e-6
_ARMIJO_C = 1e-4
_MIN_STEP = 1e-16

ObjectiveFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeFit:
    head: ParamMap  # head.W: C×h, head.b: C
    loss: float
    grad_norm: float
    converged: bool
    iterations: int


def extract_features(spec: ModelSpec, params: ParamMap, data: DomainDataset) -> npt.NDArray[np.float64]:
    """Row i = Φ(xᵢ)."""
    return frozen(forward(spec, params, data.X).features)


def probe_split(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the probe-train and probe-eval halves, assigned by a hash of each example index."""
    bits = np.array(
        [blake2b(str(i).encode(), digest_size=1).digest()[0] & 1 for i in range(n)],
        dtype=bool,
    )
    return np.flatnonzero(~bits), np.flatnonzero(bits)


# ── Objective ─────────────────────────────────────────────────────────────────


def _unpack(x: np.ndarray, num_classes: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    return x[: num_classes * width].reshape(num_classes, width), x[num_classes * width :]


def _objective(
    x: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    l2: float,
) -> tuple[float, np.ndarray]:
    n, width = features.shape
    W, b = _unpack(x, num_classes, width)
    logits = features @ W.T + b
    log_probs = log_softmax(logits, axis=1)
    rows = np.arange(n)
    value = -log_probs[rows, labels].mean() + l2 * float(np.sum(W * W))
    d_logits = softmax(logits, axis=1)
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    grad_W = d_logits.T @ features + 2.0 * l2 * W
    grad_b = d_logits.sum(axis=0)
    return float(value), np.concatenate([grad_W.ravel(), grad_b])


def probe_objective(features: npt.ArrayLike, labels: npt.ArrayLike, head: ParamMap, l2: float) -> float:
    """J(W, b) for a given head, e.g. the checkpoint's own classifier."""
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    W, b = head["head.W"], head["head.b"]
    value, _ = _objective(np.concatenate([W.ravel(), b]), F, y, W.shape[0], l2)
    return value


# ── Solvers ───────────────────────────────────────────────────────────────────


def _solve_lbfgs(fun: ObjectiveFn, x0: np.ndarray, config: ProbeConfig) -> tuple[np.ndarray, int]:
    result = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        # gtol bounds the largest gradient entry; scaled so the 2-norm also ends below tol.
        options={"maxiter": config.max_iter, "gtol": config.tol / np.sqrt(x0.size), "ftol": np.finfo(np.float64).eps},
    )
    return result.x, int(result.nit)


def _solve_gd(fun: ObjectiveFn, x0: np.ndarray, config: ProbeConfig) -> tuple[np.ndarray, int]:
    """Full-batch gradient descent with Armijo backtracking."""
    x = x0
    value, grad = fun(x)
    step = 1.0
    for iteration in range(config.max_iter):
        sq_norm = float(grad @ grad)
        if np.sqrt(sq_norm) <= config.tol:
            return x, iteration
        step = min(step * 2.0, 1e3)
        while True:
            candidate = x - step * grad
            cand_value, cand_grad = fun(candidate)
            if cand_value < value and cand_value <= value - _ARMIJO_C * step * sq_norm:
                break
            if step < _MIN_STEP:
                # No decrease along -grad at machine precision: stop at x.
                return x, iteration
            step *= 0.5
        x, value, grad = candidate, cand_value, cand_grad
    return x, config.max_iter


def train_linear_probe(
    features: npt.ArrayLike,
    labels: npt.ArrayLike,
    num_classes: int,
    config: ProbeConfig | None = None,
) -> ProbeFit:
    """Minimize J(W, b) over (W, b) on frozen ``features``.

    Stops at gradient norm ≤ ``config.tol`` or ``config.max_iter`` iterations;
    a probe that hits the iteration cap is returned with ``converged=False``.

    Raises:
        ProbeError: Fewer examples than classes, or labels outside [0, C).
    """
    config = config or ProbeConfig()
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if F.ndim != 2 or y.shape != (F.shape[0],):
        raise ProbeError(f"features must be n×h with n labels, got {F.shape} and {y.shape}")
    n, width = F.shape
    if n < num_classes:
        raise ProbeError(f"need at least {num_classes} examples to probe, got {n}")
    y = y.astype(np.intp)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ProbeError(f"labels must lie in [0, {num_classes})")

    size = num_classes * (width + 1)
    if config.init == "random":
        x0 = np.random.default_rng(config.seed).normal(0.0, 0.01, size=size)
    else:
        x0 = np.zeros(size)

    def fun(x: np.ndarray) -> tuple[float, np.ndarray]:
        return _objective(x, F, y, num_classes, config.l2)

    solver = _solve_lbfgs if config.solver == "lbfgs" else _solve_gd
    x, iterations = solver(fun, x0, config)
    value, grad = fun(x)
    grad_norm = float(np.linalg.norm(grad))
    converged = grad_norm <= config.tol
    if not converged:
        logger.warning(
            "probe_not_converged",
            solver=config.solver,
            grad_norm=grad_norm,
            iterations=iterations,
            tol=config.tol,
        )
    W, b = _unpack(x, num_classes, width)
    return ProbeFit(
        head=ParamMap({"head.W": W, "head.b": b}),
        loss=value,
        grad_norm=grad_norm,
        converged=converged,
        iterations=iterations,
    )


def head_accuracy(features: np.ndarray, labels: np.ndarray, head: ParamMap) -> float:
    logits = features @ head["head.W"].T + head["head.b"]
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ── Trajectories ──────────────────────────────────────────────────────────────


def probe_checkpoint(
    spec: ModelSpec,
    step: int,
    params: ParamMap,
    target: DomainDataset,
    config: ProbeConfig,
) -> ProbeResult:
    train_idx, eval_idx = probe_split(len(target))
    if len(eval_idx) == 0:
        raise ProbeError(f"{target.name}: probe-eval split is empty")
    features = extract_features(spec, params, target)
    carried = params.select(lambda n: n in ("head.W", "head.b"))

    fit = train_linear_probe(features[train_idx], target.y[train_idx], spec.num_classes, config)
    carried_loss = probe_objective(features[train_idx], target.y[train_idx], carried, config.l2)
    if fit.loss > carried_loss + DOMINANCE_SLACK:
        logger.warning(
            "probe_dominance_violated",
            target=target.domain_id,
            step=step,
            probe_loss=fit.loss,
            carried_loss=carried_loss,
        )
    eval_features, eval_labels = features[eval_idx], target.y[eval_idx]
    return ProbeResult(
        step=step,
        target=target.domain_id,
        carried_accuracy=head_accuracy(eval_features, eval_labels, carried),
        probe_accuracy=head_accuracy(eval_features, eval_labels, fit.head),
        probe_loss=fit.loss,
        carried_loss=carried_loss,
        converged=fit.converged,
        grad_norm=fit.grad_norm,
    )


def probe_trajectory(
    spec: ModelSpec,
    trajectory: Trajectory,
    targets: Sequence[DomainDataset],
    config: ProbeConfig | None = None,
) -> list[ProbeResult]:
    """One ProbeResult per (target, checkpoint), ordered by target then step."""
    config = config or ProbeConfig()
    if not targets:
        raise ProbeError("no target domains to probe")
    results = [
        probe_checkpoint(spec, checkpoint.step, checkpoint.params, target, config)
        for target in targets
        for checkpoint in trajectory.checkpoints
    ]
    logger.info(
        "probe_trajectory_done",
        targets=len(targets),
        checkpoints=len(trajectory.checkpoints),
        rows=len(results),
    )
    return results
