"""
app/schemas/probing.py

Linear-probe settings and per-(checkpoint, target) results.
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class ProbeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    l2: float = Field(default=1e-4, gt=0.0, description="λ_probe on ‖W‖² (strict convexity)")
    tol: float = Field(default=1e-6, gt=0.0, description="Stop when the gradient norm falls below this")
    max_iter: int = Field(default=10_000, gt=0)
    solver: Literal["lbfgs", "gd"] = "lbfgs"
    init: Literal["zeros", "random"] = "zeros"
    seed: int = Field(default=0, ge=0, description="Used by init='random'")


class ProbeResult(BaseModel):
    """One point of an accuracy / linear-probing-accuracy curve.

    Both losses are the probe objective (mean cross-entropy + λ_probe‖W‖²)
    on the probe-train split, so ``probe_loss ≤ carried_loss`` up to the
    solver tolerance.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    step: int = Field(..., ge=0)
    target: str
    carried_accuracy: float = Field(..., ge=0.0, le=1.0)
    probe_accuracy: float = Field(..., ge=0.0, le=1.0)
    probe_loss: float
    carried_loss: float
    converged: bool = True
    grad_norm: float = 0.0

    @property
    def dominance_gap(self) -> float:
        return self.probe_loss - self.carried_loss
