"""
app/workers/sweep_worker.py

Executes one (method, hyper, seed) run of a sweep in isolation.

Per run:
  - Fine-tune θ0 on the source domain with the method config
  - Evaluate the final model (or every WiSE-FT interpolation) on id_test and all targets
  - Write the trajectory checkpoints and ``run.json`` under the run directory
  - On failure: log with ``error_type`` and return ``status=failed`` rows so the
    report grid stays rectangular; nothing is raised to the caller

Runs share θ0 and the generated domains read-only and never share optimizer
state, so any number of them may execute concurrently.
"""

import json
from dataclasses import dataclass
from pathlib import Path

from app.core.logging import get_logger
from app.schemas.methods import MethodConfig, WiseFTMethod, alpha_label
from app.schemas.model import ModelSpec
from app.schemas.sweep import TradeoffRecord, make_run_id
from app.services.bench import DomainSuite, aggregate_ood, evaluate
from app.services.checkpoint import CheckpointError, step_filename, write_checkpoint
from app.services.finetune import Trajectory, finetune
from app.services.models import LoraConfigError
from app.services.params import IncompatibleParamsError, ParamMap, delta_stats
from app.services.tensor import TensorError
from app.services.training import EmptyDatasetError, TrainingAborted

logger = get_logger(__name__)

# Failures that are a property of the run's configuration or numerics, not a bug.
RUN_FAILURES = (
    TrainingAborted,
    LoraConfigError,
    IncompatibleParamsError,
    EmptyDatasetError,
    TensorError,
    CheckpointError,
)


@dataclass(frozen=True)
class RunJob:
    spec: ModelSpec
    theta0: ParamMap
    suite: DomainSuite
    method: MethodConfig
    seed: int
    out: Path | None = None

    @property
    def run_id(self) -> str:
        return make_run_id(self.method.kind, self.method.hyper, self.seed)

    def points(self) -> list[tuple[str, str]]:
        """(hyper, run_id) of every report row this job produces."""
        if isinstance(self.method, WiseFTMethod):
            return [
                (alpha_label(a), make_run_id(self.method.kind, alpha_label(a), self.seed))
                for a in self.method.alphas
            ]
        return [(self.method.hyper, self.run_id)]


def alpha_filename(alpha: float) -> str:
    return f"alpha_{alpha:g}.ftck"


def score(job: RunJob, hyper: str, run_id: str, params: ParamMap) -> TradeoffRecord:
    targets = {t.domain_id: evaluate(job.spec, params, t) for t in job.suite.targets}
    return TradeoffRecord(
        method=job.method.kind,
        hyper=hyper,
        seed=job.seed,
        run_id=run_id,
        id_acc=evaluate(job.spec, params, job.suite.id_test),
        target_acc=targets,
        avg_ood=aggregate_ood(list(targets.values())),
    )


def failed_records(job: RunJob, exc: BaseException) -> list[TradeoffRecord]:
    empty = {t.domain_id: None for t in job.suite.targets}
    return [
        TradeoffRecord(
            method=job.method.kind,
            hyper=hyper,
            seed=job.seed,
            run_id=run_id,
            target_acc=empty,
            status="failed",
            error=f"{type(exc).__name__}: {exc}",
        )
        for hyper, run_id in job.points()
    ]


def save_run(job: RunJob, trajectory: Trajectory) -> None:
    """``runs/<run_id>/step_XXXXXX.ftck`` + ``run.json``; WiSE-FT adds ``interp/<run_id>/alpha_<α>.ftck``."""
    if job.out is None:
        return
    run_dir = job.out / "runs" / job.run_id
    for checkpoint in trajectory.checkpoints:
        write_checkpoint(run_dir / step_filename(checkpoint.step), checkpoint.params)
    for interp in trajectory.interpolations:
        write_checkpoint(job.out / "interp" / job.run_id / alpha_filename(interp.alpha), interp.params)

    manifest = {
        "run_id": job.run_id,
        "seed": job.seed,
        "method": job.method.model_dump(mode="json", by_alias=True),
        "steps": trajectory.steps,
        "final_loss": trajectory.losses[-1] if trajectory.losses else None,
        "delta_stats": delta_stats(trajectory.final, job.theta0),
    }
    (run_dir / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def execute_run(job: RunJob) -> list[TradeoffRecord]:
    """Run one job to report rows. Never raises for a failing run."""
    log = logger.bind(run_id=job.run_id, method=job.method.kind, hyper=job.method.hyper, seed=job.seed)
    log.info("sweep_run_started")
    try:
        trajectory = finetune(job.spec, job.theta0, job.suite.source, job.method, run_id=job.run_id)
        save_run(job, trajectory)
        if isinstance(job.method, WiseFTMethod):
            records = [
                score(job, hyper, run_id, interp.params)
                for (hyper, run_id), interp in zip(job.points(), trajectory.interpolations)
            ]
        else:
            records = [score(job, job.method.hyper, job.run_id, trajectory.final)]
    except RUN_FAILURES as exc:
        log.error("sweep_run_failed", error=str(exc), error_type=type(exc).__name__)
        return failed_records(job, exc)
    except Exception as exc:
        # Unexpected: keep the traceback, still keep the grid rectangular.
        log.error("sweep_run_unexpected_error", error=str(exc), error_type=type(exc).__name__, exc_info=True)
        return failed_records(job, exc)

    log.info(
        "sweep_run_finished",
        rows=len(records),
        id_acc=[r.id_acc for r in records],
        avg_ood=[r.avg_ood for r in records],
    )
    return records
