"""
app/services/models.py

Classifiers f = [Φ, v] as expression graphs, parameter initialization,
and LoRA adapters on the attention projections.

Parameter names (see ``app.services.params``):
    mlp:  phi.<i>.W  phi.<i>.b  (i = 0 .. depth-1)
    attn: phi.embed.W|b  phi.q.W  phi.k.W  phi.v.W  phi.ff.W|b
    both: head.W  head.b

Graphs are cached per (spec, LoRA targets, LoRA scale); they are immutable
and safe to share between threads.
"""

from dataclasses import dataclass
from functools import lru_cache
from math import sqrt
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from app.schemas.model import ModelSpec
from app.services import autodiff as ad
from app.services.params import IncompatibleParamsError, ParamMap
from app.services.tensor import ShapeError, Tensor, as_tensor, frozen, shape_of

INPUT = "x"
ATTENTION_PROJECTIONS = ("phi.k.W", "phi.q.W", "phi.v.W")
LORA_TARGETS = ("phi.q.W", "phi.v.W")


class LoraConfigError(ValueError):
    """Raised when LoRA is requested for a model or tensor it cannot adapt."""

    pass


# ── Shapes & init ─────────────────────────────────────────────────────────────


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    shapes: dict[str, tuple[int, ...]] = {"head.W": (c, h), "head.b": (c,)}
    if spec.architecture == "mlp":
        fan_in = d
        for i in range(spec.depth):
            shapes[f"phi.{i}.W"] = (h, fan_in)
            shapes[f"phi.{i}.b"] = (h,)
            fan_in = h
    else:
        dt = spec.token_dim
        shapes.update(
            {
                "phi.embed.W": (d, d),
                "phi.embed.b": (d,),
                "phi.q.W": (dt, dt),
                "phi.k.W": (dt, dt),
                "phi.v.W": (dt, dt),
                "phi.ff.W": (h, dt),
                "phi.ff.b": (h,),
            }
        )
    return dict(sorted(shapes.items()))


def init_params(spec: ModelSpec, seed: int) -> ParamMap:
    """He-initialized weights N(0, 2/fan_in), zero biases; deterministic under ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, sqrt(2.0 / shape[-1]), size=shape)
    return ParamMap(params)


def check_params(spec: ModelSpec, params: ParamMap) -> None:
    expected = param_shapes(spec)
    actual = params.shapes()
    if actual != expected:
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        mismatched = sorted(n for n in set(expected) & set(actual) if expected[n] != actual[n])
        raise IncompatibleParamsError(
            f"params do not match {spec.architecture} spec "
            f"(missing={missing}, extra={extra}, shape_mismatch={mismatched})"
        )


# ── Graphs ────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ModelGraph:
    features: ad.Expr
    logits: ad.Expr
    attention: ad.Expr | None = None
    context: ad.Expr | None = None


def lora_names(target: str) -> tuple[str, str]:
    """``phi.q.W`` → (``lora.q.A``, ``lora.q.B``)."""
    layer = target.split(".")[1]
    return f"lora.{layer}.A", f"lora.{layer}.B"


def _weight(name: str, lora_targets: tuple[str, ...], lora_scale: float) -> ad.Expr:
    base = ad.parameter(name)
    if name not in lora_targets:
        return base
    a_name, b_name = lora_names(name)
    update = ad.matmul(ad.parameter(b_name), ad.parameter(a_name))
    return ad.add(base, ad.scale(update, lora_scale))


def _linear(x: ad.Expr, weight: ad.Expr, bias: str | None = None) -> ad.Expr:
    out = ad.matmul(x, weight, transpose_b=True)
    return ad.add(out, ad.parameter(bias)) if bias else out


@lru_cache(maxsize=64)
def model_graph(
    spec: ModelSpec,
    lora_targets: tuple[str, ...] = (),
    lora_scale: float = 1.0,
) -> ModelGraph:
    """Graph with input leaf ``x`` and one parameter leaf per tensor name."""
    x = ad.input_(INPUT)

    def head(feats: ad.Expr) -> ad.Expr:
        return _linear(feats, ad.parameter("head.W"), "head.b")

    if spec.architecture == "mlp":
        hidden = x
        for i in range(spec.depth):
            hidden = ad.relu(_linear(hidden, ad.parameter(f"phi.{i}.W"), f"phi.{i}.b"))
        return ModelGraph(features=hidden, logits=head(hidden))

    t, dt, h = spec.tokens, spec.token_dim, spec.hidden_dim

    def weight(name: str) -> ad.Expr:
        return _weight(name, lora_targets, lora_scale)

    embedded = _linear(x, ad.parameter("phi.embed.W"), "phi.embed.b")
    tokens = ad.reshape(embedded, (-1, t, dt))
    rows = ad.reshape(embedded, (-1, dt))
    q = ad.reshape(_linear(rows, weight("phi.q.W")), (-1, t, dt))
    k = ad.reshape(_linear(rows, weight("phi.k.W")), (-1, t, dt))
    v = ad.reshape(_linear(rows, weight("phi.v.W")), (-1, t, dt))
    attention = ad.softmax(ad.scale(ad.matmul(q, k, transpose_b=True), 1.0 / sqrt(dt)))
    context = ad.matmul(attention, v)
    mixed = ad.layernorm(ad.add(tokens, context))
    ff = ad.relu(_linear(ad.reshape(mixed, (-1, dt)), ad.parameter("phi.ff.W"), "phi.ff.b"))
    features = ad.mean(ad.reshape(ff, (-1, t, h)), axis=1)
    return ModelGraph(features=features, logits=head(features), attention=attention, context=context)


# ── Forward ───────────────────────────────────────────────────────────────────


class ForwardOutput(NamedTuple):
    features: Tensor
    logits: Tensor
    attention: Tensor | None = None
    context: Tensor | None = None


def as_batch(spec: ModelSpec, x: npt.ArrayLike) -> Tensor:
    batch = as_tensor(x, what="input batch")
    if batch.ndim == 1:
        batch = batch.reshape(1, -1)
    if batch.ndim != 2 or batch.shape[1] != spec.input_dim:
        raise ShapeError(f"input batch must be n×{spec.input_dim}, got {batch.shape}")
    return batch


def forward(
    spec: ModelSpec,
    params: ParamMap,
    x: npt.ArrayLike,
    adapters: tuple["LoraAdapter", ...] = (),
    lora_scale: float = 1.0,
) -> ForwardOutput:
    """Features Φ(x) and logits v(Φ(x)).

    With ``adapters`` the LoRA update is applied inside the graph
    (W0 + scale·B·A); ``apply_lora`` gives the merged equivalent.
    """
    check_params(spec, params)
    batch = as_batch(spec, x)
    bindings: dict[str, npt.ArrayLike] = dict(params)
    targets: tuple[str, ...] = ()
    if adapters:
        if spec.architecture != "attn":
            raise LoraConfigError("LoRA adapters require the attn architecture")
        targets = tuple(sorted(a.target for a in adapters))
        bindings.update(adapters_to_params(adapters))
    bindings[INPUT] = batch

    graph = model_graph(spec, targets, float(lora_scale))
    tape = ad.run_forward(graph.logits, bindings)
    return ForwardOutput(
        features=tape.value(graph.features),
        logits=tape.output,
        attention=tape.value(graph.attention) if graph.attention is not None else None,
        context=tape.value(graph.context) if graph.context is not None else None,
    )


def attention_forward(spec: ModelSpec, params: ParamMap, x: npt.ArrayLike) -> ForwardOutput:
    """Forward pass of the single-head attention classifier, attention weights included."""
    if spec.architecture != "attn":
        raise ValueError(f"attention_forward needs architecture 'attn', got {spec.architecture!r}")
    return forward(spec, params, x)


# ── LoRA ──────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank update ΔW = B·A for one projection matrix (W: d×k, B: d×r, A: r×k)."""

    target: str
    A: Tensor
    B: Tensor

    def __post_init__(self) -> None:
        a, b = frozen(np.asarray(self.A)), frozen(np.asarray(self.B))
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)
        if a.ndim != 2 or b.ndim != 2 or b.shape[1] != a.shape[0]:
            raise ShapeError(f"LoRA factors must be B: d×r and A: r×k, got B{b.shape} A{a.shape}")
        r, k = a.shape
        d = b.shape[0]
        if not 1 <= r < min(d, k):
            raise LoraConfigError(f"LoRA rank must satisfy 1 ≤ r < min(d, k) = {min(d, k)}, got {r}")

    @property
    def rank(self) -> int:
        return int(self.A.shape[0])

    def delta(self) -> Tensor:
        return self.B @ self.A


def init_lora_adapters(
    spec: ModelSpec,
    params: ParamMap,
    rank: int,
    seed: int,
    targets: tuple[str, ...] = LORA_TARGETS,
) -> tuple[LoraAdapter, ...]:
    """A ~ N(0, 1/k), B = 0, so the adapted model starts exactly at the base."""
    if spec.architecture != "attn":
        raise LoraConfigError(
            f"LoRA adapts attention projections; architecture {spec.architecture!r} has none"
        )
    rng = np.random.default_rng(seed)
    adapters = []
    for target in sorted(targets):
        if target not in ATTENTION_PROJECTIONS or target not in params:
            raise LoraConfigError(f"{target!r} is not an attention projection of this model")
        d, k = params[target].shape
        adapters.append(
            LoraAdapter(
                target=target,
                A=rng.normal(0.0, 1.0 / sqrt(k), size=(rank, k)),
                B=np.zeros((d, rank)),
            )
        )
    return tuple(adapters)


def adapters_to_params(adapters: tuple[LoraAdapter, ...]) -> ParamMap:
    entries: dict[str, Tensor] = {}
    for adapter in adapters:
        a_name, b_name = lora_names(adapter.target)
        entries[a_name] = adapter.A
        entries[b_name] = adapter.B
    return ParamMap(entries)


def adapters_from_params(params: ParamMap, targets: tuple[str, ...]) -> tuple[LoraAdapter, ...]:
    out = []
    for target in sorted(targets):
        a_name, b_name = lora_names(target)
        out.append(LoraAdapter(target=target, A=params[a_name], B=params[b_name]))
    return tuple(out)


def apply_lora(params: ParamMap, adapters: tuple[LoraAdapter, ...], scale: float = 1.0) -> ParamMap:
    """Merged view: W0 + scale·(B·A) for each target; every other entry passes through.

    The base map is never modified. Zero-B adapters and ``scale = 0`` return the
    base tensors themselves, so the result is bit-identical to ``params``.
    """
    changes: dict[str, Tensor] = {}
    for adapter in adapters:
        if adapter.target not in ATTENTION_PROJECTIONS or adapter.target not in params:
            raise LoraConfigError(f"{adapter.target!r} is not an attention projection of these params")
        base = params[adapter.target]
        delta = adapter.delta()
        if shape_of(delta) != shape_of(base):
            raise ShapeError(
                f"LoRA update for {adapter.target} has shape {delta.shape}, target is {base.shape}"
            )
        if scale == 0.0 or not np.any(adapter.B):
            continue
        changes[adapter.target] = base + scale * delta
    return params.updated(changes) if changes else params
