"""
app/main.py

Command-line entrypoint.

    python -m app.main <subcommand> --config <file> [--seed N] [--out DIR]

Subcommands:
  pretrain     generate domains, pretrain θ0          → <out>/pretrained.ftck
  finetune     one trajectory per configured method   → <out>/runs/<run_id>/step_XXXXXX.ftck
  interpolate  WiSE-FT α grid over a fine-tuned model → <out>/interp/<run_id>/alpha_<α>.ftck
  evaluate     accuracy of one checkpoint per domain  → <out>/evaluation.csv
  probe        linear probes along a stored run       → <out>/probe_<run_id>.csv
  sweep        the full grid                          → <out>/report.csv, <out>/summary.md
  report       re-validate report.csv, re-render summary.md

Exit codes: 0 when every run succeeded, 2 when any run failed, 1 on a
configuration error. Settings (log format, parallelism) come from
``FTLAB_*`` environment variables via ``app.core.config``.
"""

import argparse
import csv
from collections.abc import Callable, Sequence
from pathlib import Path

from app.core.config import get_settings
from app.core.logging import get_logger, setup_logging
from app.schemas.methods import VanillaMethod, WiseFTMethod
from app.schemas.sweep import SweepConfig
from app.services.bench import BenchError, aggregate_ood, evaluate, export_domains, generate_domains
from app.services.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from app.services.config_file import ConfigError, load_config
from app.services.finetune import InterpolationError, TrajectoryError, wise_ft_interpolate
from app.services.models import LoraConfigError, check_params
from app.services.params import IncompatibleParamsError, ParamMap
from app.services.probing import ProbeError
from app.services.reporting import ReportError, read_report_csv, validate_records, write_summary
from app.services.sweep import (
    REPORT_NAME,
    SUMMARY_NAME,
    SweepError,
    build_jobs,
    find_run_dir,
    load_trajectory,
    pretrained_filename,
    prepare_seed,
    resolve_out,
    run_probe_report,
    run_sweep,
)
from app.services.tensor import TensorError
from app.services.training import EmptyDatasetError, TrainingAborted
from app.workers.sweep_worker import alpha_filename, execute_run

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUN_FAILED = 2

# Errors that mean a run could not complete, as opposed to bad input.
RUN_ERRORS = (
    BenchError,
    CheckpointError,
    EmptyDatasetError,
    IncompatibleParamsError,
    InterpolationError,
    LoraConfigError,
    ProbeError,
    ReportError,
    SweepError,
    TensorError,
    TrainingAborted,
    TrajectoryError,
)


class Context:
    """Parsed arguments plus the lazily loaded experiment config."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = args
        self._config: SweepConfig | None = None

    @property
    def config(self) -> SweepConfig:
        if self._config is None:
            if self.args.config is None:
                raise ConfigError(f"--config is required for '{self.args.command}'")
            seeds = (self.args.seed,) if self.args.seed is not None else None
            self._config = load_config(self.args.config, seeds=seeds, out=self.args.out)
        return self._config

    @property
    def out(self) -> Path:
        if self.args.config is None:
            return Path(self.args.out or get_settings().output_dir)
        return resolve_out(self.config, self.args.out)

    @property
    def seed(self) -> int:
        return self.config.seeds[0]


def load_theta0(ctx: Context, seed: int) -> ParamMap:
    """θ0 from a previous ``pretrain`` if present, otherwise pretrain now."""
    path = ctx.out / pretrained_filename(seed, ctx.config.seeds)
    if path.exists():
        theta0 = read_checkpoint(path)
        check_params(ctx.config.model, theta0)
        logger.info("pretrained_loaded", path=str(path))
        return theta0
    _, theta0 = prepare_seed(ctx.config, seed)
    write_checkpoint(path, theta0)
    return theta0


# ── Subcommands ───────────────────────────────────────────────────────────────


def cmd_pretrain(ctx: Context) -> int:
    config = ctx.config
    for seed in config.seeds:
        suite, theta0 = prepare_seed(config, seed)
        path = write_checkpoint(ctx.out / pretrained_filename(seed, config.seeds), theta0)
        logger.info(
            "pretrain_done",
            path=str(path),
            pretrain_acc=evaluate(config.model, theta0, suite.pretrain),
            id_acc=evaluate(config.model, theta0, suite.id_test),
        )
        if ctx.args.export_data:
            data_dir = ctx.out / ("data" if len(config.seeds) == 1 else f"data_s{seed}")
            export_domains(suite, data_dir)
    return EXIT_OK


def cmd_finetune(ctx: Context) -> int:
    config = ctx.config
    failed = 0
    for seed in config.seeds:
        theta0 = load_theta0(ctx, seed)
        suite = generate_domains(config.bench, seed)
        for job in build_jobs(config, seed, suite, theta0, ctx.out):
            failed += sum(r.status == "failed" for r in execute_run(job))
    return EXIT_RUN_FAILED if failed else EXIT_OK


def cmd_interpolate(ctx: Context) -> int:
    config = ctx.config
    seed = ctx.seed
    theta0 = load_theta0(ctx, seed)
    wiseft = next((m for m in config.methods if isinstance(m, WiseFTMethod)), WiseFTMethod())
    if ctx.args.checkpoint is not None:
        theta = read_checkpoint(ctx.args.checkpoint)
        run_id = ctx.args.checkpoint.stem
    else:
        run_dir = find_run_dir(ctx.out, VanillaMethod().kind, seed)
        theta = load_trajectory(run_dir).final
        run_id = run_dir.name
    for alpha in wiseft.alphas:
        params = wise_ft_interpolate(theta0, theta, alpha)
        write_checkpoint(ctx.out / "interp" / run_id / alpha_filename(alpha), params)
    logger.info("interpolate_done", run_id=run_id, alphas=list(wiseft.alphas))
    return EXIT_OK


def cmd_evaluate(ctx: Context) -> int:
    config = ctx.config
    if ctx.args.checkpoint is None:
        raise ConfigError("evaluate needs --checkpoint <file.ftck>")
    params = read_checkpoint(ctx.args.checkpoint)
    check_params(config.model, params)
    suite = generate_domains(config.bench, ctx.seed)
    rows = [("id_test", evaluate(config.model, params, suite.id_test))]
    targets = [(f"target_{t.domain_id}", evaluate(config.model, params, t)) for t in suite.targets]
    rows += [*targets, ("avg_ood", aggregate_ood([acc for _, acc in targets]))]

    path = ctx.out / "evaluation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["domain", "accuracy"])
        writer.writerows((name, repr(acc)) for name, acc in rows)
    logger.info("evaluate_done", path=str(path), checkpoint=str(ctx.args.checkpoint))
    return EXIT_OK


def cmd_probe(ctx: Context) -> int:
    config = ctx.config
    for seed in config.seeds:
        suite = generate_domains(config.bench, seed)
        run_dir = find_run_dir(ctx.out, config.probe_run, seed)
        csv_path = ctx.out / f"probe_{run_dir.name}.csv"
        run_probe_report(config.model, run_dir, list(suite.targets), config.probe, csv_path)
    return EXIT_OK


def cmd_sweep(ctx: Context) -> int:
    outcome = run_sweep(ctx.config, out=ctx.out)
    return EXIT_RUN_FAILED if outcome.failed else EXIT_OK


def cmd_report(ctx: Context) -> int:
    try:
        records, target_ids = read_report_csv(ctx.out / REPORT_NAME)
        validate_records(records)
    except ReportError as exc:
        raise ConfigError(str(exc)) from exc
    write_summary(ctx.out / SUMMARY_NAME, records, target_ids)
    failed = sum(r.status == "failed" for r in records)
    logger.info("report_done", rows=len(records), failed=failed)
    return EXIT_RUN_FAILED if failed else EXIT_OK


COMMANDS: dict[str, tuple[Callable[[Context], int], str]] = {
    "pretrain": (cmd_pretrain, "Pretrain θ0 on the style mixture"),
    "finetune": (cmd_finetune, "Fine-tune θ0 with every configured method"),
    "interpolate": (cmd_interpolate, "WiSE-FT interpolations of a fine-tuned model"),
    "evaluate": (cmd_evaluate, "Accuracy of one checkpoint on every domain"),
    "probe": (cmd_probe, "Linear-probe every checkpoint of a stored run"),
    "sweep": (cmd_sweep, "Run the full method × hyper × seed grid"),
    "report": (cmd_report, "Re-validate report.csv and re-render summary.md"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Experiment file (key = value lines)")
    common.add_argument("--seed", type=int, help="Override the file's seeds with a single seed")
    common.add_argument("--out", type=Path, help="Output directory (default: file's 'out' or FTLAB_OUTPUT_DIR)")

    parser = argparse.ArgumentParser(prog="ftlab", description="Desk-scale robust fine-tuning lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, parents=[common], help=help_text)
        if name == "pretrain":
            cmd.add_argument("--export-data", action="store_true", help="Also write one CSV per domain")
        if name in ("interpolate", "evaluate"):
            cmd.add_argument("--checkpoint", type=Path, help="A .ftck file to load")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    setup_logging(environment=settings.environment, level=settings.log_level)
    logger.debug("cli_started", command=args.command, version=settings.app_version, environment=settings.environment)
    if args.seed is not None and args.seed < 0:
        logger.error("config_error", error="--seed must be non-negative")
        return EXIT_CONFIG

    handler, _ = COMMANDS[args.command]
    try:
        return handler(Context(args))
    except ConfigError as exc:
        logger.error("config_error", command=args.command, error=str(exc), line=exc.line)
        return EXIT_CONFIG
    except RUN_ERRORS as exc:
        logger.error("command_failed", command=args.command, error=str(exc), error_type=type(exc).__name__)
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    raise SystemExit(main())
