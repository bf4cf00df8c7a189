"""
app/services/optim.py

AdamW with decoupled weight decay, warmup + cosine learning rate, and
global-norm gradient clipping.

All functions are pure: they return new ParamMaps / OptStates and never
touch their inputs.
"""

import math
from dataclasses import dataclass

import numpy as np

from app.schemas.optim import AdamWConfig, ScheduleSpec
from app.services.params import ParamMap
from app.services.tensor import NonFiniteError


class ScheduleError(ValueError):
    """Raised for a step outside [0, total_steps]."""

    pass


def lr_at_step(sched: ScheduleSpec, t: int) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, cosine decay to 0 at ``total_steps``."""
    if not 0 <= t <= sched.total_steps:
        raise ScheduleError(f"step {t} outside [0, {sched.total_steps}]")
    if t < sched.warmup_steps:
        return sched.peak_lr * t / sched.warmup_steps
    progress = (t - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: ParamMap, max_norm: float = 1.0) -> ParamMap:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = grads.global_norm()
    if not math.isfinite(norm):
        raise NonFiniteError("gradient global norm is not finite")
    if norm <= max_norm:
        return grads
    # (g * max_norm) / norm keeps exact results for exact ratios, e.g. (3, 4) → (0.6, 0.8).
    return grads.map(lambda g: g * max_norm / norm)


@dataclass(frozen=True)
class OptState:
    step: int
    m: ParamMap
    v: ParamMap
    config: AdamWConfig

    @classmethod
    def fresh(cls, params: ParamMap, config: AdamWConfig | None = None) -> "OptState":
        zeros = params.zeros_like()
        return cls(step=0, m=zeros, v=zeros, config=config or AdamWConfig())


def adamw_step(params: ParamMap, grads: ParamMap, state: OptState, lr: float) -> tuple[ParamMap, OptState]:
    """One bias-corrected AdamW update with decoupled weight decay.

    θ ← θ − lr·(m̂ / (√v̂ + eps) + wd·θ)
    """
    params.require_compatible(grads, context="adamw_step grads")
    params.require_compatible(state.m, context="adamw_step moments")
    cfg = state.config
    t = state.step + 1
    correction1 = 1.0 - cfg.beta1**t
    correction2 = 1.0 - cfg.beta2**t

    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, theta in params.items():
        g = grads[name]
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        updated = theta - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta)
        if not np.all(np.isfinite(updated)):
            raise NonFiniteError(f"AdamW produced a non-finite value for {name}")
        new_params[name], new_m[name], new_v[name] = updated, m, v

    return ParamMap(new_params), OptState(step=t, m=ParamMap(new_m), v=ParamMap(new_v), config=cfg)
