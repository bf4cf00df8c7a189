"""
app/services/tensor.py

Dense tensor type shared by every numerical module.

A Tensor is a numpy ``float64`` ndarray in row-major order. Scalars have
shape ``()``. NaN/Inf is an error state: anything that produces one raises
``NonFiniteError`` instead of letting it propagate into checkpoints.
"""

import numpy as np
import numpy.typing as npt

Tensor = npt.NDArray[np.float64]


class TensorError(Exception):
    """Base class for tensor and expression-graph failures."""

    pass


class ShapeError(TensorError):
    """Raised when operand shapes are inconsistent with an operation."""

    pass


class UnboundLeafError(TensorError):
    """Raised when an input/parameter leaf has no value in the bindings."""

    pass


class NonFiniteError(TensorError):
    """Raised when an operation produces NaN or Inf."""

    pass


class NonScalarError(TensorError):
    """Raised when a scalar root is required (gradients, finite differences)."""

    pass


def as_tensor(values: npt.ArrayLike, *, what: str = "tensor") -> Tensor:
    """Convert ``values`` to a finite float64 array with positive dimensions.

    Raises:
        ShapeError: If any dimension is zero.
        NonFiniteError: If any entry is NaN or Inf.
    """
    array = np.asarray(values, dtype=np.float64)
    if any(dim <= 0 for dim in array.shape):
        raise ShapeError(f"{what} has a non-positive dimension: shape {array.shape}")
    ensure_finite(array, what=what)
    return array


def ensure_finite(array: np.ndarray, *, what: str = "tensor") -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def frozen(array: np.ndarray) -> Tensor:
    """Return a read-only float64 view, copying only if the input is still writeable."""
    if array.dtype == np.float64 and not array.flags.writeable:
        return array
    out = np.array(array, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


def shape_of(array: np.ndarray) -> tuple[int, ...]:
    return tuple(int(d) for d in array.shape)
