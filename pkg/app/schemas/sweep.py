"""
app/schemas/sweep.py

Sweep configuration and report rows.

Contract for ``report.csv`` (see ``app.services.reporting``):
    method,hyper,seed,id_acc,target_<id>_acc...,avg_ood,status

Rules:
  - ``avg_ood`` of an ``ok`` row is re-derivable from its target columns.
  - ``failed`` rows keep the grid rectangular; their accuracy cells are empty.
"""

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.bench import REFERENCE_SEED, BenchSpec, PretrainConfig
from app.schemas.methods import LoraMethod, MethodConfig
from app.schemas.model import ModelSpec
from app.schemas.probing import ProbeConfig


class SweepConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    bench: BenchSpec
    model: ModelSpec
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    methods: tuple[MethodConfig, ...] = Field(..., min_length=1)
    seeds: tuple[int, ...] = (REFERENCE_SEED,)
    out: Path | None = None
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    probe_run: str = Field(default="vanilla", description="Run id prefix the `probe` subcommand reads")
    max_workers: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def grid_is_consistent(self) -> "SweepConfig":
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.model.input_dim != self.bench.input_dim:
            raise ValueError(
                f"model.input_dim ({self.model.input_dim}) must equal bench.input_dim ({self.bench.input_dim})"
            )
        if self.model.num_classes != self.bench.num_classes:
            raise ValueError(
                f"model.num_classes ({self.model.num_classes}) must equal bench.num_classes ({self.bench.num_classes})"
            )
        keys = [(m.kind, m.hyper) for m in self.methods]
        duplicates = sorted({k for k in keys if keys.count(k) > 1})
        if duplicates:
            raise ValueError(f"duplicate method entries: {duplicates}")
        if self.model.architecture != "attn" and any(isinstance(m, LoraMethod) for m in self.methods):
            raise ValueError("LoRA targets attention projections; it requires model.architecture = attn")
        return self


RunStatus = Literal["ok", "failed"]


class TradeoffRecord(BaseModel):
    """One sweep point: a (method, hyper, seed) model evaluated ID and on every target."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    method: str
    hyper: str = ""
    seed: int
    run_id: str
    id_acc: float | None = None
    target_acc: dict[str, float | None] = Field(default_factory=dict)
    avg_ood: float | None = None
    status: RunStatus = "ok"
    error: str | None = None

    @property
    def hyper_value(self) -> float:
        """Leading numeric setting of ``hyper`` (``lambda=0.01/match=features`` → 0.01), 0 if none."""
        head = self.hyper.split("/", 1)[0]
        _, _, number = head.partition("=")
        try:
            return float(number)
        except ValueError:
            return 0.0

    @property
    def sort_key(self) -> tuple[str, float, str, int]:
        return (self.method, self.hyper_value, self.hyper, self.seed)


def make_run_id(method: str, hyper: str, seed: int) -> str:
    """Filesystem-safe id, e.g. ``l2-lambda=0.01-s42`` or ``lora-rank=2+frozen_head-s42``."""
    parts = [method, hyper.replace("/", "+")] if hyper else [method]
    return "-".join([*parts, f"s{seed}"])
