"""
app/core/config.py

Process-level settings loaded from environment variables / .env file.
Uses Pydantic Settings v2 for type-safe config with fail-fast validation:
a malformed value aborts the CLI with a clear error instead of silently
falling back to a default.

Experiment parameters (benchmark, model, methods, grids) do NOT live here;
they come from the ``key = value`` experiment file parsed by
``app.services.config_file``. This module only carries knobs that describe
the machine and the operator: log format, parallelism, output location.

Usage:
    from app.core.config import get_settings
    settings = get_settings()
"""

from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="FTLAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        # Extra fields in .env are silently ignored.
        extra="ignore",
    )

    # ── Application ───────────────────────────────────────────────────────────
    environment: Literal["development", "production"] = Field(
        default="development",
        description="Runtime environment; selects the log format (console vs JSON lines)",
    )
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field(default="INFO")
    app_version: str = Field(default="0.1.0")

    # ── Outputs ───────────────────────────────────────────────────────────────
    output_dir: Path = Field(
        default=Path("runs"),
        description="Default --out directory when the experiment file names none",
    )

    # ── Execution ─────────────────────────────────────────────────────────────
    max_workers: int = Field(
        default=1,
        ge=1,
        description="Independent sweep runs executed concurrently (1 = sequential)",
    )
    checkpoints_per_run: int = Field(
        default=10,
        ge=1,
        description="Evenly spaced trajectory checkpoints per fine-tuning run (plus step 0 and final)",
    )

    # ── Validators ────────────────────────────────────────────────────────────
    @field_validator("log_level", mode="before")
    @classmethod
    def log_level_upper(cls, v: str) -> str:
        return v.upper() if isinstance(v, str) else v


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Return (and cache) the settings singleton.

    The cache means settings are validated once at first call.
    Use `get_settings.cache_clear()` in tests to reload from a fresh environment.
    """
    return Settings()
