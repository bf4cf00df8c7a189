"""
app/services/params.py

ParamMap: the named-tensor container every other module speaks.

Canonical names:
    phi.<layer>.<W|b>   feature extractor Φ
    head.<W|b>          linear head v
    lora.<q|v>.<A|B>    LoRA adapter factors (only inside LoRA training)

Iteration order is lexicographic by name. Stored tensors are read-only
float64 arrays; writing into one raises.
"""

from collections.abc import Callable, Iterable, Iterator, Mapping

import numpy as np
import numpy.typing as npt

from app.services.tensor import Tensor, ensure_finite, frozen, shape_of

HEAD_PREFIX = "head."


class IncompatibleParamsError(ValueError):
    """Raised when two ParamMaps differ in names or shapes."""

    pass


class ParamMap(Mapping[str, Tensor]):
    """Immutable ordered map ``name -> Tensor``."""

    __slots__ = ("_entries",)

    def __init__(
        self,
        entries: Mapping[str, npt.ArrayLike] | Iterable[tuple[str, npt.ArrayLike]] = (),
    ) -> None:
        items = entries.items() if isinstance(entries, Mapping) else entries
        collected: dict[str, Tensor] = {}
        for name, value in items:
            if not isinstance(name, str) or not name:
                raise ValueError(f"parameter names must be non-empty strings, got {name!r}")
            if name in collected:
                raise ValueError(f"duplicate parameter name {name!r}")
            array = frozen(np.asarray(value, dtype=np.float64))
            ensure_finite(array, what=name)
            collected[name] = array
        self._entries = {name: collected[name] for name in sorted(collected)}

    # ── Mapping protocol ─────────────────────────────────────────────────────

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{name}:{'x'.join(map(str, t.shape)) or 'scalar'}" for name, t in self.items())
        return f"ParamMap({inner})"

    # ── Structure ────────────────────────────────────────────────────────────

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: shape_of(t) for name, t in self._entries.items()}

    def is_compatible(self, other: "ParamMap") -> bool:
        """Same names and same shapes, exactly."""
        return self.shapes() == other.shapes()

    def require_compatible(self, other: "ParamMap", *, context: str = "params") -> None:
        if self.is_compatible(other):
            return
        mine, theirs = self.shapes(), other.shapes()
        missing = sorted(set(theirs) - set(mine))
        extra = sorted(set(mine) - set(theirs))
        mismatched = sorted(n for n in set(mine) & set(theirs) if mine[n] != theirs[n])
        raise IncompatibleParamsError(
            f"{context}: incompatible ParamMaps "
            f"(missing={missing}, extra={extra}, shape_mismatch={mismatched})"
        )

    def num_values(self) -> int:
        return int(sum(t.size for t in self._entries.values()))

    # ── Derivation ───────────────────────────────────────────────────────────

    def updated(self, changes: Mapping[str, npt.ArrayLike]) -> "ParamMap":
        """Return a copy with ``changes`` replacing (or adding) entries."""
        merged: dict[str, npt.ArrayLike] = dict(self._entries)
        merged.update(changes)
        return ParamMap(merged)

    def select(self, predicate: Callable[[str], bool]) -> "ParamMap":
        return ParamMap({n: t for n, t in self._entries.items() if predicate(n)})

    def map(self, fn: Callable[[Tensor], npt.ArrayLike]) -> "ParamMap":
        return ParamMap({n: fn(t) for n, t in self._entries.items()})

    def zip_map(
        self,
        other: "ParamMap",
        fn: Callable[[Tensor, Tensor], npt.ArrayLike],
        *,
        context: str = "params",
    ) -> "ParamMap":
        self.require_compatible(other, context=context)
        return ParamMap({n: fn(t, other[n]) for n, t in self._entries.items()})

    def zeros_like(self) -> "ParamMap":
        return self.map(np.zeros_like)

    # ── Comparisons ──────────────────────────────────────────────────────────

    def bitwise_equal(self, other: "ParamMap") -> bool:
        """True iff names, shapes and every float's bit pattern match."""
        if not self.is_compatible(other):
            return False
        return all(t.tobytes() == other[n].tobytes() for n, t in self._entries.items())

    def global_norm(self) -> float:
        """L2 norm over all entries jointly, accumulated in name order."""
        total = 0.0
        for t in self._entries.values():
            total += float(np.dot(t.ravel(), t.ravel()))
        return float(np.sqrt(total))


def is_head(name: str) -> bool:
    return name.startswith(HEAD_PREFIX)


def param_delta(theta: ParamMap, theta0: ParamMap) -> ParamMap:
    """Elementwise ``theta - theta0`` with identical names and shapes."""
    return theta.zip_map(theta0, np.subtract, context="param_delta")


def param_add(a: ParamMap, b: ParamMap) -> ParamMap:
    """Elementwise ``a + b``; the inverse of ``param_delta``."""
    return a.zip_map(b, np.add, context="param_add")


def delta_stats(theta: ParamMap, theta0: ParamMap, *, zero_tol: float = 1e-8) -> dict[str, float]:
    """Distance and sparsity of ``theta - theta0``.

    ``sparsity`` is the fraction of delta entries with magnitude below ``zero_tol``.
    """
    delta = param_delta(theta, theta0)
    count = delta.num_values()
    near_zero = sum(int(np.count_nonzero(np.abs(t) < zero_tol)) for t in delta.values())
    return {
        "l2_distance": delta.global_norm(),
        "sparsity": near_zero / count if count else 1.0,
        "num_values": float(count),
    }
