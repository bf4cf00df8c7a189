"""
app/services/autodiff.py

Expression graphs over float64 tensors with reverse-mode differentiation.

Build a graph with the constructor functions below, bind leaves by name,
then:

    value = evaluate(loss, bindings)
    grads = gradient(loss, bindings, wrt={"head.W", "head.b"})
    err = finite_difference_check(loss, bindings, wrt={"head.W"})

Rules:
  - Nodes are immutable and compared by identity; a graph can be shared
    read-only across threads. All caches live on the per-call ``Tape``.
  - No broadcasting except the bias-add over rows (``add(x, b)`` with ``b``
    1-D of the last dimension). Every other mismatch raises ``ShapeError``.
  - ReLU and |·| use subgradient 0 at exactly 0.
  - Every node output is checked for NaN/Inf.
"""

from collections.abc import Callable, Collection, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import numpy.typing as npt

from app.services.params import ParamMap
from app.services.tensor import (
    NonFiniteError,
    NonScalarError,
    ShapeError,
    Tensor,
    UnboundLeafError,
)

LAYERNORM_EPS = 1e-5

NodeKind = Literal[
    "input",
    "parameter",
    "matmul",
    "add",
    "relu",
    "layernorm",
    "softmax",
    "mean",
    "scale",
    "concat",
    "cross_entropy",
    "squared_error",
    "l1_norm",
    "sum",
    "reshape",
    "transpose",
]

Bindings = Mapping[str, npt.ArrayLike]


@dataclass(frozen=True, eq=False)
class Expr:
    """One node of an expression graph."""

    kind: NodeKind
    children: tuple["Expr", ...] = ()
    name: str | None = None
    attrs: Mapping[str, Any] = field(default_factory=dict)

    @property
    def is_leaf(self) -> bool:
        return self.kind in ("input", "parameter")

    def __add__(self, other: "Expr") -> "Expr":
        return add(self, other)

    def __sub__(self, other: "Expr") -> "Expr":
        return add(self, scale(other, -1.0))

    def __mul__(self, factor: float) -> "Expr":
        return scale(self, factor)

    __rmul__ = __mul__

    def __matmul__(self, other: "Expr") -> "Expr":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f"{self.kind}:{self.name}" if self.name else self.kind
        return f"Expr({label})"


# ── Constructors ──────────────────────────────────────────────────────────────


def input_(name: str) -> Expr:
    """Leaf bound per call, never differentiated (data, labels, anchors, teacher outputs)."""
    return Expr("input", name=name)


def parameter(name: str) -> Expr:
    """Leaf bound per call; may appear in ``wrt``."""
    return Expr("parameter", name=name)


def matmul(a: Expr, b: Expr, *, transpose_b: bool = False) -> Expr:
    """``a @ b`` (or ``a @ bᵀ``) for 2-D operands or 3-D operands with equal batch dims."""
    return Expr("matmul", (a, b), attrs={"transpose_b": transpose_b})


def add(a: Expr, b: Expr) -> Expr:
    return Expr("add", (a, b))


def relu(x: Expr) -> Expr:
    return Expr("relu", (x,))


def layernorm(x: Expr) -> Expr:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    return Expr("layernorm", (x,))


def softmax(x: Expr) -> Expr:
    """Softmax over the last axis."""
    return Expr("softmax", (x,))


def mean(x: Expr, axis: int | None = None) -> Expr:
    """Mean over ``axis``, or over every entry (scalar result) when ``axis`` is None."""
    return Expr("mean", (x,), attrs={"axis": axis})


def scale(x: Expr, factor: float) -> Expr:
    return Expr("scale", (x,), attrs={"factor": float(factor)})


def concat(xs: Sequence[Expr], axis: int = -1) -> Expr:
    if not xs:
        raise ShapeError("concat needs at least one operand")
    return Expr("concat", tuple(xs), attrs={"axis": axis})


def cross_entropy(logits: Expr, labels: Expr) -> Expr:
    """Mean multinomial cross-entropy of ``logits`` (n×C) against integer ``labels`` (n)."""
    return Expr("cross_entropy", (logits, labels))


def squared_error(a: Expr, b: Expr) -> Expr:
    """``Σ (a − b)²`` over all entries (scalar)."""
    return Expr("squared_error", (a, b))


def l1_norm(x: Expr) -> Expr:
    """``Σ |x|`` over all entries (scalar)."""
    return Expr("l1_norm", (x,))


def sum_(x: Expr) -> Expr:
    return Expr("sum", (x,))


def reshape(x: Expr, shape: Sequence[int]) -> Expr:
    """Row-major reshape; one dimension may be -1."""
    return Expr("reshape", (x,), attrs={"shape": tuple(int(d) for d in shape)})


def transpose(x: Expr) -> Expr:
    """Swap the last two axes."""
    return Expr("transpose", (x,))


def add_all(terms: Sequence[Expr]) -> Expr:
    """Left fold of ``add``; fixed order keeps accumulation deterministic."""
    if not terms:
        raise ShapeError("add_all needs at least one term")
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


# ── Forward rules ─────────────────────────────────────────────────────────────


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _fw_matmul(node: Expr, a: Tensor, b: Tensor) -> Tensor:
    if node.attrs["transpose_b"]:
        if b.ndim < 2:
            raise ShapeError(f"matmul: cannot transpose operand of shape {b.shape}")
        b = _swap(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: operands must both be 2-D or 3-D, got {a.shape} and {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch mismatch {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimension mismatch {a.shape} vs {b.shape}")
    return a @ b


def _is_bias_add(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]


def _fw_add(node: Expr, a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape or _is_bias_add(a, b):
        return a + b
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def _fw_relu(node: Expr, x: Tensor) -> Tensor:
    return np.where(x > 0.0, x, 0.0)


def _layernorm_parts(x: Tensor) -> tuple[Tensor, Tensor]:
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LAYERNORM_EPS)
    return centered * inv_std, inv_std


def _fw_layernorm(node: Expr, x: Tensor) -> Tensor:
    if x.ndim < 1:
        raise ShapeError("layernorm needs at least one axis")
    return _layernorm_parts(x)[0]


def _fw_softmax(node: Expr, x: Tensor) -> Tensor:
    if x.ndim < 1:
        raise ShapeError("softmax needs at least one axis")
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _fw_mean(node: Expr, x: Tensor) -> Tensor:
    axis = node.attrs["axis"]
    if axis is None:
        return np.asarray(x.mean(), dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.shape}")
    return x.mean(axis=axis)


def _fw_scale(node: Expr, x: Tensor) -> Tensor:
    return x * node.attrs["factor"]


def _fw_concat(node: Expr, *xs: Tensor) -> Tensor:
    try:
        return np.concatenate(xs, axis=node.attrs["axis"])
    except (ValueError, np.exceptions.AxisError) as exc:
        raise ShapeError(f"concat: {exc}") from exc


def _label_indices(labels: Tensor, n: int, num_classes: int) -> np.ndarray:
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {n}")
    indices = labels.astype(np.intp)
    if not np.array_equal(indices, labels) or np.any(indices < 0) or np.any(indices >= num_classes):
        raise ShapeError(f"cross_entropy: labels must be integers in [0, {num_classes})")
    return indices


def _fw_cross_entropy(node: Expr, logits: Tensor, labels: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be n×C, got {logits.shape}")
    n, num_classes = logits.shape
    indices = _label_indices(labels, n, num_classes)
    peak = logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits - peak).sum(axis=1)) + peak[:, 0]
    return np.asarray((log_norm - logits[np.arange(n), indices]).mean(), dtype=np.float64)


def _fw_squared_error(node: Expr, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shapes differ {a.shape} vs {b.shape}")
    diff = a - b
    return np.asarray(np.dot(diff.ravel(), diff.ravel()), dtype=np.float64)


def _fw_l1_norm(node: Expr, x: Tensor) -> Tensor:
    return np.asarray(np.abs(x).sum(), dtype=np.float64)


def _fw_sum(node: Expr, x: Tensor) -> Tensor:
    return np.asarray(x.sum(), dtype=np.float64)


def _fw_reshape(node: Expr, x: Tensor) -> Tensor:
    try:
        return x.reshape(node.attrs["shape"])
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {node.attrs['shape']}") from exc


def _fw_transpose(node: Expr, x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {x.shape}")
    return _swap(x)


_FORWARD: dict[str, Callable[..., Tensor]] = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "relu": _fw_relu,
    "layernorm": _fw_layernorm,
    "softmax": _fw_softmax,
    "mean": _fw_mean,
    "scale": _fw_scale,
    "concat": _fw_concat,
    "cross_entropy": _fw_cross_entropy,
    "squared_error": _fw_squared_error,
    "l1_norm": _fw_l1_norm,
    "sum": _fw_sum,
    "reshape": _fw_reshape,
    "transpose": _fw_transpose,
}


# ── Backward rules ────────────────────────────────────────────────────────────
# Each returns one gradient per child (None for non-differentiable children).

Grads = tuple[Tensor | None, ...]


def _bw_matmul(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    a, b = ins
    b_eff = _swap(b) if node.attrs["transpose_b"] else b
    grad_a = g @ _swap(b_eff)
    grad_b_eff = _swap(a) @ g
    grad_b = _swap(grad_b_eff) if node.attrs["transpose_b"] else grad_b_eff
    return grad_a, grad_b


def _bw_add(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    a, b = ins
    if a.shape == b.shape:
        return g, g
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def _bw_relu(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    return (np.where(ins[0] > 0.0, g, 0.0),)


def _bw_layernorm(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    normalized, inv_std = _layernorm_parts(ins[0])
    grad = inv_std * (
        g - g.mean(axis=-1, keepdims=True) - normalized * (g * normalized).mean(axis=-1, keepdims=True)
    )
    return (grad,)


def _bw_softmax(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _bw_mean(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    x = ins[0]
    axis = node.attrs["axis"]
    if axis is None:
        return (np.full(x.shape, float(g) / x.size),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / x.shape[axis],)


def _bw_scale(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    return (g * node.attrs["factor"],)


def _bw_concat(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    axis = node.attrs["axis"]
    cuts = np.cumsum([x.shape[axis] for x in ins])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _bw_cross_entropy(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    logits, labels = ins
    n = logits.shape[0]
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(n), labels.astype(np.intp)] -= 1.0
    return probs * (float(g) / n), None


def _bw_squared_error(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    a, b = ins
    grad = 2.0 * float(g) * (a - b)
    return grad, -grad


def _bw_l1_norm(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    return (np.sign(ins[0]) * float(g),)


def _bw_sum(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    return (np.full(ins[0].shape, float(g)),)


def _bw_reshape(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    return (g.reshape(ins[0].shape),)


def _bw_transpose(node: Expr, ins: Sequence[Tensor], out: Tensor, g: Tensor) -> Grads:
    return (_swap(g),)


_BACKWARD: dict[str, Callable[[Expr, Sequence[Tensor], Tensor, Tensor], Grads]] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "relu": _bw_relu,
    "layernorm": _bw_layernorm,
    "softmax": _bw_softmax,
    "mean": _bw_mean,
    "scale": _bw_scale,
    "concat": _bw_concat,
    "cross_entropy": _bw_cross_entropy,
    "squared_error": _bw_squared_error,
    "l1_norm": _bw_l1_norm,
    "sum": _bw_sum,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
}


# ── Evaluation ────────────────────────────────────────────────────────────────


def topological_order(root: Expr) -> list[Expr]:
    """Children-before-parents order, deterministic in child order."""
    order: list[Expr] = []
    visited: set[Expr] = set()
    stack: list[tuple[Expr, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in visited:
            continue
        visited.add(node)
        stack.append((node, True))
        for child in reversed(node.children):
            if child not in visited:
                stack.append((child, False))
    return order


@dataclass
class Tape:
    """Forward values of one evaluation, keyed by node identity."""

    root: Expr
    order: list[Expr]
    values: dict[Expr, Tensor]

    @property
    def output(self) -> Tensor:
        return self.values[self.root]

    def value(self, node: Expr) -> Tensor:
        try:
            return self.values[node]
        except KeyError:
            raise KeyError(f"{node!r} is not part of this graph") from None


def _bind_leaf(node: Expr, bindings: Bindings) -> Tensor:
    if node.name not in bindings:
        raise UnboundLeafError(f"{node.kind} leaf {node.name!r} is not bound")
    return np.asarray(bindings[node.name], dtype=np.float64)


def run_forward(expr: Expr, bindings: Bindings) -> Tape:
    """Evaluate every node reachable from ``expr`` and keep the values."""
    order = topological_order(expr)
    values: dict[Expr, Tensor] = {}
    for node in order:
        if node.is_leaf:
            value = _bind_leaf(node, bindings)
        else:
            value = _FORWARD[node.kind](node, *(values[c] for c in node.children))
        if not np.all(np.isfinite(value)):
            label = node.name or node.kind
            raise NonFiniteError(f"{label} produced a non-finite value")
        values[node] = value
    return Tape(root=expr, order=order, values=values)


def evaluate(expr: Expr, bindings: Bindings) -> Tensor:
    """Forward value of ``expr`` under ``bindings``.

    Raises:
        ShapeError: Operand shapes are inconsistent.
        UnboundLeafError: A leaf has no binding.
        NonFiniteError: Any intermediate value is NaN/Inf.
    """
    return run_forward(expr, bindings).output


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise NonScalarError(f"expected a scalar root, got shape {value.shape}")
    return float(value.reshape(()))


def backward(tape: Tape, wrt: Collection[str], bindings: Bindings) -> ParamMap:
    """Gradients of the (scalar) tape root with respect to the named parameters."""
    _scalar(tape.output)
    wanted = set(wrt)
    for name in wanted:
        if name not in bindings:
            raise UnboundLeafError(f"gradient requested for unbound parameter {name!r}")

    needs: dict[Expr, bool] = {}
    for node in tape.order:
        if node.kind == "parameter":
            needs[node] = node.name in wanted
        else:
            needs[node] = any(needs[c] for c in node.children)

    accumulated: dict[str, Tensor] = {}
    pending: dict[Expr, Tensor] = {tape.root: np.ones_like(tape.output)}
    for node in reversed(tape.order):
        g = pending.pop(node, None)
        if g is None or not needs[node]:
            continue
        if node.kind == "parameter":
            prior = accumulated.get(node.name)
            accumulated[node.name] = g if prior is None else prior + g
            continue
        ins = [tape.values[c] for c in node.children]
        child_grads = _BACKWARD[node.kind](node, ins, tape.values[node], g)
        for child, cg in zip(node.children, child_grads):
            if cg is None or not needs[child]:
                continue
            prior = pending.get(child)
            pending[child] = cg if prior is None else prior + cg

    result: dict[str, Tensor] = {}
    for name in sorted(wanted):
        grad = accumulated.get(name)
        if grad is None:
            grad = np.zeros(np.shape(bindings[name]), dtype=np.float64)
        result[name] = grad
    return ParamMap(result)


def gradient(expr: Expr, bindings: Bindings, wrt: Collection[str]) -> ParamMap:
    """∂expr/∂p for every parameter name in ``wrt``.

    Names bound but absent from the graph get a zero gradient.

    Raises:
        NonScalarError: ``expr`` is not scalar.
        UnboundLeafError: A leaf or a ``wrt`` name has no binding.
    """
    return backward(run_forward(expr, bindings), wrt, bindings)


def value_and_gradient(expr: Expr, bindings: Bindings, wrt: Collection[str]) -> tuple[float, ParamMap]:
    """Scalar value and gradients from a single forward pass."""
    tape = run_forward(expr, bindings)
    return _scalar(tape.output), backward(tape, wrt, bindings)


def finite_difference_check(
    expr: Expr,
    bindings: Bindings,
    wrt: Collection[str],
    eps: float = 1e-5,
) -> float:
    """Max relative error between ``gradient`` and central differences.

    Each coordinate is perturbed by ±eps; the error of one coordinate is
    ``|numeric − analytic| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _scalar(evaluate(expr, bindings))
    analytic = gradient(expr, bindings, wrt)

    worst = 0.0
    for name in sorted(wrt):
        probe = np.array(bindings[name], dtype=np.float64, copy=True)
        flat = probe.reshape(-1)
        shifted = dict(bindings)
        shifted[name] = probe
        expected = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = _scalar(evaluate(expr, shifted))
            flat[i] = original - eps
            minus = _scalar(evaluate(expr, shifted))
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            error = abs(numeric - expected[i]) / max(1.0, abs(expected[i]))
            worst = max(worst, error)
    return worst
