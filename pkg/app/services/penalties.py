"""
app/services/penalties.py

Feature-protection penalties added to the fine-tuning loss:

    L1   λ·Σ|θ − θ0|                 anchor θ0 bound as constant inputs
    L2   λ·Σ(θ − θ0)²
    KD   λ·mean_x ‖out_θ(x) − out_θ0(x)‖²   teacher outputs bound as a constant input

The ``*_expr`` builders return graph fragments that the training loop adds
to the cross-entropy; the plain functions evaluate one penalty on its own
and return its value together with its gradient map.
"""

from collections.abc import Callable, Iterable
from typing import Literal, NamedTuple

import numpy as np
import numpy.typing as npt

from app.schemas.model import ModelSpec
from app.services import autodiff as ad
from app.services.models import INPUT, as_batch, forward, model_graph
from app.services.params import ParamMap, is_head

KD_TARGET = "kd.target"


class PenaltyValue(NamedTuple):
    value: float
    grads: ParamMap


def anchor_name(name: str) -> str:
    return f"anchor.{name}"


def penalized_names(names: Iterable[str], *, exempt_head: bool = False) -> list[str]:
    return sorted(n for n in names if not (exempt_head and is_head(n)))


def _check_lambda(lam: float) -> None:
    if lam < 0:
        raise ValueError(f"penalty weight must be ≥ 0, got {lam}")


def anchor_bindings(theta0: ParamMap, names: Iterable[str]) -> dict[str, np.ndarray]:
    return {anchor_name(n): theta0[n] for n in names}


# ── Graph fragments ───────────────────────────────────────────────────────────


def l1_penalty_expr(names: list[str], lam: float) -> ad.Expr | None:
    if not names:
        return None
    terms = [ad.l1_norm(ad.parameter(n) - ad.input_(anchor_name(n))) for n in names]
    return ad.scale(ad.add_all(terms), lam)


def l2_penalty_expr(names: list[str], lam: float) -> ad.Expr | None:
    if not names:
        return None
    terms = [ad.squared_error(ad.parameter(n), ad.input_(anchor_name(n))) for n in names]
    return ad.scale(ad.add_all(terms), lam)


def kd_penalty_expr(output: ad.Expr, lam: float, batch_size: int) -> ad.Expr:
    """λ/n · Σ‖output − teacher‖² with the teacher bound at ``KD_TARGET``."""
    return ad.scale(ad.squared_error(output, ad.input_(KD_TARGET)), lam / batch_size)


# ── Stand-alone evaluation ────────────────────────────────────────────────────


def _anchor_penalty(
    builder: Callable[[list[str], float], ad.Expr | None],
    theta: ParamMap,
    theta0: ParamMap,
    lam: float,
    exempt_head: bool,
) -> PenaltyValue:
    _check_lambda(lam)
    theta.require_compatible(theta0, context="anchor penalty")
    names = penalized_names(theta, exempt_head=exempt_head)
    expr = builder(names, lam)
    if expr is None:
        return PenaltyValue(0.0, theta.zeros_like())
    bindings = {**theta, **anchor_bindings(theta0, names)}
    value, grads = ad.value_and_gradient(expr, bindings, wrt=list(theta))
    return PenaltyValue(value, grads)


def l1_penalty(theta: ParamMap, theta0: ParamMap, lam: float, *, exempt_head: bool = False) -> PenaltyValue:
    """λ·Σ|θᵢ − θ0ᵢ| and its subgradient λ·sign(θ − θ0), sign(0) = 0."""
    return _anchor_penalty(l1_penalty_expr, theta, theta0, lam, exempt_head)


def l2_penalty(theta: ParamMap, theta0: ParamMap, lam: float, *, exempt_head: bool = False) -> PenaltyValue:
    """λ·Σ(θᵢ − θ0ᵢ)² and its gradient 2λ(θ − θ0)."""
    return _anchor_penalty(l2_penalty_expr, theta, theta0, lam, exempt_head)


def kd_penalty(
    spec: ModelSpec,
    theta: ParamMap,
    theta0: ParamMap,
    x: npt.ArrayLike,
    lam: float,
    match: Literal["logits", "features"] = "logits",
) -> PenaltyValue:
    """λ·mean over the batch of ‖out_θ(x) − out_θ0(x)‖²; θ0 receives no gradient."""
    _check_lambda(lam)
    theta.require_compatible(theta0, context="kd_penalty")
    batch = as_batch(spec, x)
    teacher = forward(spec, theta0, batch)
    graph = model_graph(spec)
    output = graph.logits if match == "logits" else graph.features
    target = teacher.logits if match == "logits" else teacher.features
    expr = kd_penalty_expr(output, lam, batch.shape[0])
    bindings = {**theta, INPUT: batch, KD_TARGET: target}
    value, grads = ad.value_and_gradient(expr, bindings, wrt=list(theta))
    return PenaltyValue(value, grads)
