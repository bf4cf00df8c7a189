"""
app/schemas/optim.py

Optimizer and learning-rate schedule settings (AdamW, warmup + cosine).

Defaults are desk-scale: peak lr 3e-4 and 50 warmup steps, i.e. the usual
CLIP fine-tuning recipe (3e-5, 500 steps) scaled to runs of a few hundred steps.
"""

from pydantic import BaseModel, ConfigDict, Field, model_validator


class AdamWConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    # Zero by default: the anchor penalties are the regularizers under study.
    weight_decay: float = Field(default=0.0, ge=0.0)


class ScheduleSpec(BaseModel):
    """Linear warmup to ``peak_lr`` then cosine decay to 0 at ``total_steps``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    peak_lr: float = Field(..., gt=0.0)
    warmup_steps: int = Field(..., gt=0)
    total_steps: int = Field(..., gt=0)

    @model_validator(mode="after")
    def warmup_inside_run(self) -> "ScheduleSpec":
        if not self.warmup_steps < self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})"
            )
        return self

    @classmethod
    def for_run(cls, peak_lr: float, warmup_steps: int, total_steps: int) -> "ScheduleSpec":
        """Schedule for a run of ``total_steps`` (≥ 2), shrinking warmup to fit short runs."""
        warmup = warmup_steps if warmup_steps < total_steps else max(1, total_steps // 10)
        return cls(peak_lr=peak_lr, warmup_steps=warmup, total_steps=total_steps)
