"""
app/schemas/methods.py

Fine-tuning method configurations, a tagged union on ``kind``:

    pretrained  evaluate θ0 as-is (the zero-shot row of a report)
    vanilla     full fine-tuning, cross-entropy only
    l1 / l2     cross-entropy + λ·|θ − θ0|₁  /  λ·‖θ − θ0‖²
    kd          cross-entropy + λ·mean‖out_θ(x) − out_θ0(x)‖²
    lora        low-rank adapters on W_q / W_v, base frozen
    wiseft      vanilla fine-tuning, then (1−α)·θ0 + α·θ for each α

Every variant carries the shared training fields (steps, batch size, seed,
schedule, checkpoint interval).
"""

from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.schemas.optim import AdamWConfig


class TrainingFields(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    steps: int = Field(default=300, ge=0)
    batch_size: int = Field(default=64, gt=0)
    seed: int = Field(default=0, ge=0)
    checkpoint_interval: int | None = Field(
        default=None,
        gt=0,
        description="Steps between trajectory checkpoints; None spreads checkpoints_per_run evenly",
    )
    peak_lr: float = Field(default=3e-4, gt=0.0)
    warmup_steps: int = Field(default=50, gt=0)
    max_grad_norm: float = Field(default=1.0, gt=0.0)
    optimizer: AdamWConfig = Field(default_factory=AdamWConfig)
    exempt_head: bool = Field(default=False, description="Anchor/KD penalties skip head.* tensors")

    @field_validator("steps")
    @classmethod
    def steps_zero_or_schedulable(cls, v: int) -> int:
        # A warmup + cosine schedule needs 0 < warmup < total.
        if v == 1:
            raise ValueError("steps must be 0 or at least 2")
        return v

    def interval(self, checkpoints_per_run: int) -> int:
        if self.checkpoint_interval is not None:
            return self.checkpoint_interval
        return max(1, self.steps // checkpoints_per_run)

    def training_fields(self) -> dict:
        return self.model_dump(include=set(TrainingFields.model_fields))

    @property
    def hyper(self) -> str:
        return ""

    @property
    def hyper_value(self) -> float:
        return 0.0


class PretrainedMethod(TrainingFields):
    kind: Literal["pretrained"] = "pretrained"


class VanillaMethod(TrainingFields):
    kind: Literal["vanilla"] = "vanilla"


class _AnchorMethod(TrainingFields):
    lam: float = Field(..., ge=0.0, alias="lambda")

    @property
    def hyper(self) -> str:
        return f"lambda={self.lam:g}"

    @property
    def hyper_value(self) -> float:
        return self.lam


class L1Method(_AnchorMethod):
    kind: Literal["l1"] = "l1"


class L2Method(_AnchorMethod):
    kind: Literal["l2"] = "l2"


class KDMethod(_AnchorMethod):
    kind: Literal["kd"] = "kd"
    match: Literal["logits", "features"] = "logits"

    @property
    def hyper(self) -> str:
        base = f"lambda={self.lam:g}"
        return base if self.match == "logits" else f"{base}/match=features"


class LoraMethod(TrainingFields):
    kind: Literal["lora"] = "lora"
    rank: int = Field(..., ge=1)
    scale: float = Field(default=1.0, ge=0.0)
    freeze_head: bool = False

    @property
    def hyper(self) -> str:
        parts = [f"rank={self.rank}"]
        if self.scale != 1.0:
            parts.append(f"scale={self.scale:g}")
        if self.freeze_head:
            parts.append("frozen_head")
        return "/".join(parts)

    @property
    def hyper_value(self) -> float:
        return float(self.rank)


class WiseFTMethod(TrainingFields):
    kind: Literal["wiseft"] = "wiseft"
    alphas: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)

    @field_validator("alphas")
    @classmethod
    def alphas_in_unit_interval(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not v:
            raise ValueError("alpha grid must not be empty")
        bad = [a for a in v if not 0.0 <= a <= 1.0]
        if bad:
            raise ValueError(f"alpha values must lie in [0, 1], got {bad}")
        return tuple(sorted(set(v)))

    def base_method(self) -> VanillaMethod:
        """The vanilla fine-tuning run the interpolation sweep is built on."""
        return VanillaMethod(**self.training_fields())


def alpha_label(alpha: float) -> str:
    return f"alpha={alpha:g}"


MethodConfig = Annotated[
    Union[
        PretrainedMethod,
        VanillaMethod,
        L1Method,
        L2Method,
        KDMethod,
        LoraMethod,
        WiseFTMethod,
    ],
    Field(discriminator="kind"),
]
