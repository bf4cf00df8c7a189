"""
app/services/sweep.py

Sweep driver: pretrain once per seed, fine-tune every method config, evaluate,
and assemble the report.

Runs may execute on a thread pool (``max_workers`` > 1); rows are collected
per run and the report is written single-threaded in sorted key order, so the
bytes of ``report.csv`` do not depend on scheduling.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from app.core.config import get_settings
from app.core.logging import get_logger
from app.schemas.model import ModelSpec
from app.schemas.probing import ProbeConfig, ProbeResult
from app.schemas.sweep import SweepConfig, TradeoffRecord
from app.services.bench import DomainDataset, DomainSuite, generate_domains, pretrain
from app.services.checkpoint import CheckpointError, list_trajectory, read_checkpoint, write_checkpoint
from app.services.finetune import Checkpoint, Trajectory
from app.services.params import ParamMap
from app.services.probing import probe_trajectory
from app.services.reporting import (
    sort_records,
    validate_probe_results,
    validate_records,
    write_probe_csv,
    write_report_csv,
    write_summary,
)
from app.workers.sweep_worker import RunJob, execute_run

logger = get_logger(__name__)

REPORT_NAME = "report.csv"
SUMMARY_NAME = "summary.md"


class SweepError(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepOutcome:
    records: list[TradeoffRecord]
    target_ids: list[str]
    out: Path

    @property
    def failed(self) -> int:
        return sum(r.status == "failed" for r in self.records)

    @property
    def report_path(self) -> Path:
        return self.out / REPORT_NAME

    @property
    def summary_path(self) -> Path:
        return self.out / SUMMARY_NAME


def pretrained_filename(seed: int, seeds: tuple[int, ...]) -> str:
    return "pretrained.ftck" if len(seeds) == 1 else f"pretrained_s{seed}.ftck"


def resolve_out(config: SweepConfig, out: Path | None = None) -> Path:
    return Path(out or config.out or get_settings().output_dir)


def ensure_writable(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise SweepError(f"output directory {out} is not writable: {exc}") from exc
    return out


def prepare_seed(config: SweepConfig, seed: int) -> tuple[DomainSuite, ParamMap]:
    """Domains and θ0 for one seed; the seed drives data, initialization and batch order."""
    suite = generate_domains(config.bench, seed)
    theta0 = pretrain(config.model, suite.pretrain, config.pretrain.model_copy(update={"seed": seed}))
    return suite, theta0


def build_jobs(config: SweepConfig, seed: int, suite: DomainSuite, theta0: ParamMap, out: Path | None) -> list[RunJob]:
    return [
        RunJob(
            spec=config.model,
            theta0=theta0,
            suite=suite,
            method=method.model_copy(update={"seed": seed}),
            seed=seed,
            out=out,
        )
        for method in config.methods
    ]


def run_sweep(
    config: SweepConfig,
    *,
    out: Path | None = None,
    max_workers: int | None = None,
    write_files: bool = True,
) -> SweepOutcome:
    """Pretrain per seed, fine-tune and evaluate every method, write the report.

    A failing run becomes ``status=failed`` rows; the sweep itself only raises
    for an unwritable output directory.
    """
    out_dir = resolve_out(config, out)
    if write_files:
        ensure_writable(out_dir)
    workers = max_workers or config.max_workers or get_settings().max_workers
    logger.info(
        "sweep_started",
        out=str(out_dir),
        seeds=list(config.seeds),
        methods=len(config.methods),
        max_workers=workers,
    )

    jobs: list[RunJob] = []
    target_ids: list[str] = []
    for seed in config.seeds:
        suite, theta0 = prepare_seed(config, seed)
        target_ids = [t.domain_id for t in suite.targets]
        if write_files:
            write_checkpoint(out_dir / pretrained_filename(seed, config.seeds), theta0)
        jobs.extend(build_jobs(config, seed, suite, theta0, out_dir if write_files else None))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(execute_run, jobs))
    else:
        results = [execute_run(job) for job in jobs]

    records = sort_records(r for rows in results for r in rows)
    validate_records(records)
    outcome = SweepOutcome(records=records, target_ids=target_ids, out=out_dir)
    if write_files:
        write_report_csv(outcome.report_path, records, target_ids)
        write_summary(outcome.summary_path, records, target_ids)
    logger.info("sweep_finished", rows=len(records), failed=outcome.failed)
    return outcome


# ── Probing from stored trajectories ──────────────────────────────────────────


def load_trajectory(run_dir: Path) -> Trajectory:
    files = list_trajectory(run_dir)
    if not files:
        raise CheckpointError(f"no step_*.ftck checkpoints in {run_dir}")
    return Trajectory(checkpoints=tuple(Checkpoint(step, read_checkpoint(path)) for step, path in files))


def find_run_dir(out: Path, run_prefix: str, seed: int) -> Path:
    runs = out / "runs"
    candidates = []
    if runs.is_dir():
        candidates = sorted(d for d in runs.glob(f"{run_prefix}*") if d.is_dir() and d.name.endswith(f"-s{seed}"))
    if not candidates:
        raise CheckpointError(f"no run matching {run_prefix!r} for seed {seed} under {runs}")
    return candidates[0]


def run_probe_report(
    spec: ModelSpec,
    run_dir: Path,
    targets: list[DomainDataset],
    config: ProbeConfig,
    csv_path: Path | None = None,
) -> list[ProbeResult]:
    """Probe every stored checkpoint of ``run_dir`` on every target; optionally write the CSV.

    Raises:
        CheckpointError: Missing or corrupt checkpoint files.
        ReportError: A probe failed to reach the carried head's loss.
    """
    trajectory = load_trajectory(run_dir)
    results = probe_trajectory(spec, trajectory, targets, config)
    if csv_path is not None:
        write_probe_csv(csv_path, results)
    validate_probe_results(results)
    return results
