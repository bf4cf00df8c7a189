"""
app/schemas/bench.py

Synthetic multi-style domain-shift benchmark description.

Each style s is an affine, full-rank map of a shared k-dimensional semantic
space into the d-dimensional input space. Pretraining sees a mixture of
styles, fine-tuning sees only the source style, and evaluation uses held-out
target styles (some seen during pretraining, some never seen).
"""

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.methods import TrainingFields


class BenchSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_classes: int = Field(..., gt=0)
    core_dim: int = Field(..., gt=0, description="Semantic dimension k")
    input_dim: int = Field(..., gt=0, description="Observed dimension d")
    num_styles: int = Field(..., gt=0)
    pretrain_styles: tuple[int, ...]
    source_style: int = Field(..., ge=0)
    target_styles: tuple[int, ...]
    train_per_class: int = Field(..., gt=0, description="Samples per (class, style) in training splits")
    test_per_class: int = Field(..., gt=0, description="Samples per (class, style) in test splits")
    sigma_core: float = Field(..., ge=0.0)
    sigma_noise: float = Field(..., ge=0.0)
    kappa: float = Field(..., ge=1.0, description="Singular values of style maps lie in [1/κ, κ]")

    @model_validator(mode="after")
    def styles_are_consistent(self) -> "BenchSpec":
        if self.core_dim > self.input_dim:
            raise ValueError(f"core_dim ({self.core_dim}) must be ≤ input_dim ({self.input_dim})")
        if not self.pretrain_styles:
            raise ValueError("pretrain_styles must not be empty")
        if not self.target_styles:
            raise ValueError("target_styles must not be empty")
        every = set(self.pretrain_styles) | set(self.target_styles) | {self.source_style}
        out_of_range = sorted(s for s in every if not 0 <= s < self.num_styles)
        if out_of_range:
            raise ValueError(f"styles {out_of_range} outside [0, {self.num_styles})")
        if self.source_style not in self.pretrain_styles:
            raise ValueError("source_style must be one of pretrain_styles")
        if self.source_style in self.target_styles:
            raise ValueError("target_styles must not contain source_style")
        if len(set(self.target_styles)) != len(self.target_styles):
            raise ValueError("target_styles contains duplicates")
        if len(set(self.pretrain_styles)) != len(self.pretrain_styles):
            raise ValueError("pretrain_styles contains duplicates")
        return self

    @classmethod
    def reference(cls) -> "BenchSpec":
        """Frozen reference benchmark used by every acceptance check.

        Styles 6 and 7 never appear in pretraining (the harder, unseen shifts).
        """
        return cls(
            num_classes=10,
            core_dim=16,
            input_dim=32,
            num_styles=8,
            pretrain_styles=(0, 1, 2, 3, 4, 5),
            source_style=0,
            target_styles=(1, 2, 3, 4, 5, 6, 7),
            train_per_class=100,
            test_per_class=50,
            sigma_core=0.3,
            sigma_noise=0.1,
            kappa=3.0,
        )


REFERENCE_SEED = 42


class PretrainConfig(TrainingFields):
    """Pretraining from scratch on the style mixture.

    Stops at ``steps`` or when the mean loss of a ``plateau_window``-step window
    improves on the previous window by less than ``plateau_tol`` (relative).
    """

    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=128, gt=0)
    peak_lr: float = Field(default=3e-3, gt=0.0)
    warmup_steps: int = Field(default=100, gt=0)
    plateau_window: int = Field(default=100, gt=0)
    plateau_tol: float = Field(default=1e-3, ge=0.0)
